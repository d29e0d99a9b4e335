use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::ToyImage;
use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 100;
pub const REL_TOLERANCE: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"UGCB";

/// K-means codebook over flattened RGB patches.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualCodebook {
    k: usize,
    dim: usize,
    seed: u64,
    centroids: Vec<f32>,
    inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centers` (ties to the lowest index).
fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Flattened `3·P²` vector of one image patch.
pub fn patch_vector(image: &ToyImage, row: usize, col: usize, patch: usize) -> Vec<f32> {
    image.patch(row, col, patch).into_iter().map(f32::from).collect()
}

/// All patches of an image in row-major cell order.
pub fn extract_patches(image: &ToyImage, patch: usize) -> Result<Vec<Vec<f32>>> {
    let g = image.grid(patch)?;
    Ok((0..g * g)
        .map(|c| patch_vector(image, c / g, c % g, patch))
        .collect())
}

/// Fits `k` centroids with k-means++ seeding and Lloyd iterations, stopping
/// after [`MAX_ITERS`] rounds or when inertia improves by less than
/// [`REL_TOLERANCE`] relative. A cluster that loses all members keeps its
/// previous centroid.
pub fn fit_codebook(patches: &[Vec<f32>], k: usize, seed: u64) -> Result<VisualCodebook> {
    if k == 0 {
        return Err(Error::invalid("codebook size must be >= 1"));
    }
    if patches.len() < k {
        return Err(Error::invalid(format!(
            "need at least {k} patches to fit {k} centroids, got {}",
            patches.len()
        )));
    }
    let dim = patches[0].len();
    if dim == 0 || patches.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("patches must share a non-zero dimension"));
    }
    let data: Vec<f64> = patches.iter().flatten().map(|&v| v as f64).collect();
    let n = patches.len();
    let point = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    centers.extend_from_slice(point(first));
    chosen[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    acc += d;
                    pick = Some(i);
                    if acc > r {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            (0..n).find(|&i| !chosen[i]).expect("n >= k")
        };
        chosen[pick] = true;
        let c = point(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c));
        }
        centers.extend_from_slice(&c);
    }

    let mut assign = vec![0usize; n];
    let mut prev = f64::INFINITY;
    let mut inertia = 0.0;
    for _ in 0..MAX_ITERS {
        inertia = 0.0;
        for i in 0..n {
            let (c, d) = nearest(point(i), &centers, dim);
            assign[i] = c;
            inertia += d;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..][..dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        if inertia == 0.0 || prev - inertia <= REL_TOLERANCE * prev {
            break;
        }
        prev = inertia;
    }
    // inertia of the final centroids
    let final_inertia: f64 = (0..n).map(|i| nearest(point(i), &centers, dim).1).sum();
    debug_assert!(final_inertia <= inertia + 1e-6 * inertia.max(1.0));

    Ok(VisualCodebook {
        k,
        dim,
        seed,
        centroids: centers.into_iter().map(|v| v as f32).collect(),
        inertia: final_inertia,
    })
}

impl VisualCodebook {
    pub fn from_centroids(k: usize, dim: usize, seed: u64, centroids: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 || centroids.len() != k * dim {
            return Err(Error::invalid(format!(
                "{} centroid values do not form {k} x {dim}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("centroids must be finite"));
        }
        Ok(Self {
            k,
            dim,
            seed,
            centroids,
            inertia: f64::NAN,
        })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Sum of squared distances from training patches to their centroids
    /// (NaN for codebooks not produced by [`fit_codebook`]).
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Index of the nearest centroid for one patch vector.
    pub fn nearest(&self, patch: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d: f64 = patch
                .iter()
                .zip(c)
                .map(|(&a, &b)| {
                    let t = a as f64 - b as f64;
                    t * t
                })
                .sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn patch_size(&self) -> Result<usize> {
        let p = ((self.dim / 3) as f64).sqrt().round() as usize;
        if 3 * p * p != self.dim {
            return Err(Error::invalid(format!("dimension {} is not 3·P²", self.dim)));
        }
        Ok(p)
    }

    /// Codebook indices of an image's patches, row-major.
    pub fn quantize(&self, image: &ToyImage) -> Result<Vec<usize>> {
        let p = self.patch_size()?;
        Ok(extract_patches(image, p)?.iter().map(|v| self.nearest(v)).collect())
    }

    /// Tiles centroids back into an image, rounding and clamping to `[0, 255]`.
    pub fn dequantize(&self, codes: &[usize], grid_size: usize) -> Result<ToyImage> {
        if codes.len() != grid_size * grid_size {
            return Err(Error::invalid(format!(
                "expected {} codes for a {grid_size}x{grid_size} grid, got {}",
                grid_size * grid_size,
                codes.len()
            )));
        }
        let p = self.patch_size()?;
        let side = grid_size * p;
        let mut img = ToyImage::filled(side, side, [0, 0, 0]);
        for (cell, &code) in codes.iter().enumerate() {
            if code >= self.k {
                return Err(Error::invalid(format!("code {code} outside codebook of {}", self.k)));
            }
            let bytes: Vec<u8> = self
                .centroid(code)
                .iter()
                .map(|v| v.round().clamp(0.0, 255.0) as u8)
                .collect();
            img.set_patch(cell / grid_size, cell % grid_size, p, &bytes);
        }
        Ok(img)
    }

    /// Mean squared per-channel error of quantize→dequantize over images.
    pub fn reconstruction_mse(&self, images: &[ToyImage]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for img in images {
            let g = img.grid(self.patch_size()?)?;
            let rec = self.dequantize(&self.quantize(img)?, g)?;
            for (a, b) in img.raw().iter().zip(rec.raw()) {
                let d = *a as f64 - *b as f64;
                sum += d * d;
            }
            n += img.raw().len();
        }
        Ok(sum / n.max(1) as f64)
    }

    /// `UGCB`, K (u32), dim (u32), seed (u64), then K·dim f32; little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in &self.centroids {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Corrupt("not a codebook file".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let k = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut centroids = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            r.read_exact(&mut b4)?;
            centroids.push(f32::from_le_bytes(b4));
        }
        Self::from_centroids(k, dim, seed, centroids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_image_samples, CorpusConfig};

    fn randn_patches(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(0.0..255.0)).collect())
            .collect()
    }

    #[test]
    fn k_distinct_patches_are_reproduced() {
        let pts = randn_patches(6, 3, 1);
        let cb = fit_codebook(&pts, 6, 0).unwrap();
        assert_eq!(cb.inertia(), 0.0);
        let mut got: Vec<Vec<f32>> = (0..6).map(|i| cb.centroid(i).to_vec()).collect();
        let mut want = pts.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn single_centroid_is_mean() {
        let pts = randn_patches(10, 4, 2);
        let cb = fit_codebook(&pts, 1, 0).unwrap();
        for j in 0..4 {
            let mean = pts.iter().map(|p| p[j] as f64).sum::<f64>() / 10.0;
            assert!((cb.centroid(0)[j] as f64 - mean).abs() < 1e-3);
        }
    }

    #[test]
    fn exhaustive_two_partition_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f32>> = (0..8)
            .map(|i| {
                let base = if i < 5 { 40.0 } else { 160.0 };
                (0..3).map(|_| base + rng.random_range(-30.0..30.0f32)).collect()
            })
            .collect();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 7) {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<&Vec<f32>> = (0..8)
                    .filter(|&i| (i < 7 && (mask >> i) & 1 == 1) == side)
                    .map(|i| &pts[i])
                    .collect();
                for j in 0..3 {
                    let m = members.iter().map(|p| p[j] as f64).sum::<f64>() / members.len() as f64;
                    cost += members.iter().map(|p| (p[j] as f64 - m).powi(2)).sum::<f64>();
                }
            }
            best = best.min(cost);
        }
        let cb = fit_codebook(&pts, 2, 3).unwrap();
        assert!((cb.inertia() - best).abs() <= 1e-6 * best, "{} vs {best}", cb.inertia());
    }

    #[test]
    fn too_few_patches() {
        assert!(fit_codebook(&randn_patches(3, 2, 0), 4, 0).is_err());
        assert!(fit_codebook(&randn_patches(3, 2, 0), 0, 0).is_err());
    }

    #[test]
    fn quantize_is_nearest_and_round_trips_centroid_tiles() {
        let samples = gen_image_samples(&CorpusConfig::default(), 1, 40);
        let patches: Vec<Vec<f32>> = samples
            .iter()
            .flat_map(|s| extract_patches(&s.image, 4).unwrap())
            .collect();
        let cb = fit_codebook(&patches, 16, 5).unwrap();
        let codes = cb.quantize(&samples[0].image).unwrap();
        let rec = cb.dequantize(&codes, 4).unwrap();
        // centroids rounded to bytes may shift by rounding, but the tiling
        // of a dequantized image must quantize back to itself
        assert_eq!(cb.quantize(&rec).unwrap(), codes);
        assert!(cb.dequantize(&codes[..3], 4).is_err());
    }

    #[test]
    fn file_round_trip() {
        let cb = fit_codebook(&randn_patches(20, 12, 4), 5, 7).unwrap();
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        let back = VisualCodebook::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.centroids, cb.centroids);
        assert_eq!((back.k, back.dim, back.seed), (5, 12, 7));
        assert!(VisualCodebook::read_from(&b"XXXX"[..]).is_err());
    }
}
