use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::{Attr, Object, Scene, Shape};
use crate::error::{Error, Result};

pub const BACKGROUND_RGB: [u8; 3] = [128, 128, 128];

/// Row-major RGB image with 8-bit channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ToyImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "raw buffer of {} bytes does not match {width}x{height} RGB",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// The `patch × patch` block at cell `(row, col)`, flattened as RGB
    /// triples in row-major order.
    pub fn patch(&self, row: usize, col: usize, patch: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(patch * patch * 3);
        for y in 0..patch {
            let start = ((row * patch + y) * self.width + col * patch) * 3;
            out.extend_from_slice(&self.pixels[start..start + patch * 3]);
        }
        out
    }

    pub fn set_patch(&mut self, row: usize, col: usize, patch: usize, data: &[u8]) {
        for y in 0..patch {
            let start = ((row * patch + y) * self.width + col * patch) * 3;
            self.pixels[start..start + patch * 3]
                .copy_from_slice(&data[y * patch * 3..(y + 1) * patch * 3]);
        }
    }

    /// Grid side length for square images tiled by `patch`.
    pub fn grid(&self, patch: usize) -> Result<usize> {
        if patch == 0 || self.width % patch != 0 || self.height % patch != 0 || self.width != self.height {
            return Err(Error::invalid(format!(
                "{}x{} image cannot be tiled into square {patch}px patches",
                self.width, self.height
            )));
        }
        Ok(self.width / patch)
    }

    /// Binary PPM (P6).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)
    }
}

/// Whether pixel `(y, x)` of a `p × p` patch belongs to `shape`.
fn covers(shape: Shape, p: usize, y: usize, x: usize) -> bool {
    let c = (p as f64 - 1.0) / 2.0;
    let (fy, fx) = (y as f64, x as f64);
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = p as f64 / 2.0;
            (fx - c).powi(2) + (fy - c).powi(2) <= r * r
        }
        Shape::Triangle => (fx - c).abs() <= (fy + 1.0) / 2.0,
    }
}

pub fn background_patch(p: usize) -> Vec<u8> {
    BACKGROUND_RGB.repeat(p * p)
}

/// The fixed prototype patch for an object.
pub fn object_patch(attr: Attr, p: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(p * p * 3);
    let fg = attr.color.rgb();
    for y in 0..p {
        for x in 0..p {
            out.extend_from_slice(if covers(attr.shape, p, y, x) {
                &fg
            } else {
                &BACKGROUND_RGB
            });
        }
    }
    out
}

/// Per-pixel noise added at render time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Jitter {
    /// Each channel is offset by a uniform integer in `[-amplitude, amplitude]`.
    pub amplitude: u8,
    pub seed: u64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        amplitude: 0,
        seed: 0,
    };
}

pub fn render(scene: &Scene, patch: usize, jitter: Jitter) -> ToyImage {
    let side = scene.grid_size * patch;
    let mut img = ToyImage::filled(side, side, BACKGROUND_RGB);
    for o in &scene.objects {
        img.set_patch(o.row, o.col, patch, &object_patch(o.attr(), patch));
    }
    if jitter.amplitude > 0 {
        let a = jitter.amplitude as i16;
        let mut rng = ChaCha8Rng::seed_from_u64(jitter.seed);
        for v in img.pixels.iter_mut() {
            let d: i16 = rng.random_range(-a..=a);
            *v = (*v as i16 + d).clamp(0, 255) as u8;
        }
    }
    img
}

fn sq_dist(a: &[u8], b: &[u8]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum()
}

/// Nearest prototype for one patch: `None` is background. Ties go to the
/// background first, then to the lowest attribute index.
pub fn classify_patch(data: &[u8], patch: usize) -> Option<Attr> {
    let mut best = (sq_dist(data, &background_patch(patch)), None);
    for attr in Attr::all() {
        let d = sq_dist(data, &object_patch(attr, patch));
        if d < best.0 {
            best = (d, Some(attr));
        }
    }
    best.1
}

/// Reconstructs the objects drawn on an image by per-cell nearest-prototype
/// classification, in row-major cell order. The result may hold any number
/// of objects.
pub fn detect(image: &ToyImage, patch: usize) -> Result<Vec<Object>> {
    let g = image.grid(patch)?;
    let mut out = Vec::new();
    for row in 0..g {
        for col in 0..g {
            if let Some(attr) = classify_patch(&image.patch(row, col, patch), patch) {
                out.push(Object {
                    shape: attr.shape,
                    color: attr.color,
                    row,
                    col,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::scene::{all_scenes, gen_scene};

    #[test]
    fn prototypes_are_distinct() {
        let mut protos = vec![background_patch(4)];
        protos.extend(Attr::all().map(|a| object_patch(a, 4)));
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                assert_ne!(protos[i], protos[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn empty_cell_equals_background() {
        let s = gen_scene(5, 4);
        let img = render(&s, 4, Jitter::NONE);
        for row in 0..4 {
            for col in 0..4 {
                if s.object_at(row, col).is_none() {
                    assert_eq!(img.patch(row, col, 4), background_patch(4));
                }
            }
        }
        assert_eq!(img, render(&s, 4, Jitter::NONE));
    }

    #[test]
    fn detect_recovers_every_scene() {
        for (i, s) in all_scenes(4).enumerate() {
            let jitter = Jitter {
                amplitude: 8,
                seed: i as u64,
            };
            let img = render(&s, 4, jitter);
            assert_eq!(detect(&img, 4).unwrap(), s.objects, "scene {i}");
        }
    }

    #[test]
    fn ppm_header() {
        let img = ToyImage::filled(2, 3, [1, 2, 3]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n2 3\n255\n"));
        assert_eq!(buf.len(), 11 + 18);
    }
}
