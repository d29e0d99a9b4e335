//! Caption grammar over shapes, colors, counts, and spatial relations.
//!
//! ```text
//! caption  := np | np relation np
//! np       := ("a" | "one") COLOR SHAPE
//! relation := "left of" | "to the left of" | "right of" | "to the right of"
//!           | "above" | "below"
//! ```
//!
//! Every caption parses to a canonical [`Predicate`]: "right of" and "below"
//! are normalized to "left of" and "above" with the operands swapped.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{detect, ToyImage};
use super::scene::{all_scenes, Attr, Color, Object, Scene, Shape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
}

impl Caption {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    /// First operand's column is strictly smaller.
    LeftOf,
    /// First operand's row is strictly smaller.
    Above,
}

impl Relation {
    fn holds(self, a: &Object, b: &Object) -> bool {
        match self {
            Relation::LeftOf => a.col < b.col,
            Relation::Above => a.row < b.row,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Predicate {
    One(Attr),
    Pair {
        first: Attr,
        relation: Relation,
        second: Attr,
    },
}

/// Per-axis outcome of checking a caption against an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub overall: bool,
    /// Multiset of shapes matches.
    pub object: bool,
    /// Multiset of colors matches.
    pub color: bool,
    /// Number of objects matches.
    pub count: bool,
    /// Spatial relation satisfied by some attribute-exact assignment;
    /// vacuously true for single-object captions.
    pub position: bool,
}

impl Predicate {
    /// The single predicate every caption of `scene` expresses.
    pub fn of_scene(scene: &Scene) -> Self {
        match scene.objects.as_slice() {
            [o] => Predicate::One(o.attr()),
            [a, b] => {
                // objects are in row-major order, so `a` is never right of / below `b`
                if a.col != b.col {
                    let (l, r) = if a.col < b.col { (a, b) } else { (b, a) };
                    Predicate::Pair {
                        first: l.attr(),
                        relation: Relation::LeftOf,
                        second: r.attr(),
                    }
                } else {
                    Predicate::Pair {
                        first: a.attr(),
                        relation: Relation::Above,
                        second: b.attr(),
                    }
                }
            }
            _ => panic!("scene must hold one or two objects"),
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Predicate::One(_) => 1,
            Predicate::Pair { .. } => 2,
        }
    }

    fn attrs(&self) -> Vec<Attr> {
        match *self {
            Predicate::One(a) => vec![a],
            Predicate::Pair { first, second, .. } => vec![first, second],
        }
    }

    pub fn evaluate(&self, objects: &[Object]) -> Verdict {
        let count = objects.len() == self.arity();
        let mut want_shapes: Vec<Shape> = self.attrs().iter().map(|a| a.shape).collect();
        let mut got_shapes: Vec<Shape> = objects.iter().map(|o| o.shape).collect();
        want_shapes.sort();
        got_shapes.sort();
        let mut want_colors: Vec<Color> = self.attrs().iter().map(|a| a.color).collect();
        let mut got_colors: Vec<Color> = objects.iter().map(|o| o.color).collect();
        want_colors.sort();
        got_colors.sort();
        let (overall, position) = match *self {
            Predicate::One(a) => (count && objects[0].attr() == a, true),
            Predicate::Pair {
                first,
                relation,
                second,
            } => {
                let sat = count
                    && [(0, 1), (1, 0)].iter().any(|&(i, j)| {
                        objects[i].attr() == first
                            && objects[j].attr() == second
                            && relation.holds(&objects[i], &objects[j])
                    });
                (sat, sat)
            }
        };
        Verdict {
            overall,
            object: want_shapes == got_shapes,
            color: want_colors == got_colors,
            count,
            position,
        }
    }

    pub fn holds(&self, scene: &Scene) -> bool {
        self.evaluate(&scene.objects).overall
    }
}

fn np(article: &str, a: Attr) -> String {
    format!("{article} {} {}", a.color.word(), a.shape.word())
}

/// A caption for `scene`; `seed` picks among equivalent phrasings.
pub fn caption(scene: &Scene, seed: u64) -> Caption {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = match Predicate::of_scene(scene) {
        Predicate::One(a) => np(if rng.random_bool(0.5) { "a" } else { "one" }, a),
        Predicate::Pair {
            first,
            relation: Relation::LeftOf,
            second,
        } => {
            let (f, s) = (np("a", first), np("a", second));
            match rng.random_range(0..4) {
                0 => format!("{f} left of {s}"),
                1 => format!("{f} to the left of {s}"),
                2 => format!("{s} right of {f}"),
                _ => format!("{s} to the right of {f}"),
            }
        }
        Predicate::Pair {
            first,
            relation: Relation::Above,
            second,
        } => {
            let (f, s) = (np("a", first), np("a", second));
            if rng.random_bool(0.5) {
                format!("{f} above {s}")
            } else {
                format!("{s} below {f}")
            }
        }
    };
    Caption { text }
}

const RELATIONS: [(&[&str], Relation, bool); 6] = [
    (&["left", "of"], Relation::LeftOf, false),
    (&["to", "the", "left", "of"], Relation::LeftOf, false),
    (&["right", "of"], Relation::LeftOf, true),
    (&["to", "the", "right", "of"], Relation::LeftOf, true),
    (&["above"], Relation::Above, false),
    (&["below"], Relation::Above, true),
];

fn parse_np(words: &[&str], at: usize) -> Result<Attr> {
    let word = |i: usize| {
        words
            .get(at + i)
            .copied()
            .ok_or_else(|| Error::parse(at + i, "unexpected end of caption"))
    };
    let article = word(0)?;
    if article != "a" && article != "one" {
        return Err(Error::parse(at, format!("expected article, found {article:?}")));
    }
    let color = word(1)?;
    let color =
        Color::from_word(color).ok_or_else(|| Error::parse(at + 1, format!("unknown color {color:?}")))?;
    let shape = word(2)?;
    let shape =
        Shape::from_word(shape).ok_or_else(|| Error::parse(at + 2, format!("unknown shape {shape:?}")))?;
    Ok(Attr { shape, color })
}

/// Parses caption text into its canonical predicate. Positions in errors
/// are word indices.
pub fn parse_caption(text: &str) -> Result<Predicate> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let a = parse_np(&words, 0)?;
    if words.len() == 3 {
        return Ok(Predicate::One(a));
    }
    let rest = &words[3..];
    let (phrase, relation, swapped) = RELATIONS
        .iter()
        .filter(|(p, _, _)| rest.starts_with(p))
        .max_by_key(|(p, _, _)| p.len())
        .ok_or_else(|| Error::parse(3, format!("expected relation, found {:?}", rest[0])))?;
    let at = 3 + phrase.len();
    let b = parse_np(&words, at)?;
    if words.len() != at + 3 {
        return Err(Error::parse(at + 3, "trailing words after caption"));
    }
    let (first, second) = if *swapped { (b, a) } else { (a, b) };
    Ok(Predicate::Pair {
        first,
        relation: *relation,
        second,
    })
}

/// Scores a caption against an image: detects objects cell by cell and
/// evaluates the caption's predicate on them.
pub fn check(caption: &Caption, image: &ToyImage, patch: usize) -> Result<Verdict> {
    let pred = parse_caption(&caption.text)?;
    Ok(pred.evaluate(&detect(image, patch)?))
}

/// Exact fraction of legal scenes satisfying `pred`.
pub fn base_rate(pred: &Predicate, grid_size: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in all_scenes(grid_size) {
        total += 1;
        hits += pred.holds(&s) as usize;
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::image::{render, Jitter};
    use crate::corpus::scene::gen_scene;

    fn obj(shape: Shape, color: Color, row: usize, col: usize) -> Object {
        Object {
            shape,
            color,
            row,
            col,
        }
    }

    #[test]
    fn single_object_phrasings() {
        let s = Scene {
            grid_size: 4,
            objects: vec![obj(Shape::Square, Color::Red, 2, 1)],
        };
        let texts: std::collections::HashSet<String> = (0..20).map(|i| caption(&s, i).text).collect();
        assert!(texts.contains("a red square"));
        assert!(texts.iter().all(|t| t == "a red square" || t == "one red square"));
    }

    #[test]
    fn relations_normalize() {
        let p = parse_caption("a blue circle right of a red square").unwrap();
        let q = parse_caption("a red square to the left of a blue circle").unwrap();
        assert_eq!(p, q);
        let p = parse_caption("a green triangle below a yellow square").unwrap();
        assert!(matches!(p, Predicate::Pair { relation: Relation::Above, .. }));
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "a red", "a purple square", "the red square", "a red square near a blue circle", "a red square above a blue circle now"] {
            assert!(parse_caption(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn left_of_scene_caption_holds() {
        let s = Scene {
            grid_size: 4,
            objects: vec![obj(Shape::Circle, Color::Blue, 0, 3), obj(Shape::Square, Color::Red, 1, 0)],
        };
        for seed in 0..8 {
            let c = caption(&s, seed);
            assert!(parse_caption(&c.text).unwrap().holds(&s), "{}", c.text);
        }
    }

    #[test]
    fn mismatched_image_fails_axes() {
        let s = Scene {
            grid_size: 4,
            objects: vec![obj(Shape::Circle, Color::Blue, 1, 1)],
        };
        let img = render(&s, 4, Jitter::NONE);
        let v = check(&Caption::new("a red square"), &img, 4).unwrap();
        assert!(!v.overall && !v.color && !v.object);
        assert!(v.count);
    }

    #[test]
    fn generated_captions_check_true() {
        for seed in 0..2000 {
            let s = gen_scene(seed, 4);
            let img = render(&s, 4, Jitter { amplitude: 8, seed });
            let v = check(&caption(&s, seed), &img, 4).unwrap();
            assert!(v.overall && v.object && v.color && v.count && v.position);
        }
    }
}
