use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [40, 60, 220],
            Color::Yellow => [230, 210, 40],
        }
    }
}

/// Shape and color of one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Attr {
    pub shape: Shape,
    pub color: Color,
}

impl Attr {
    pub const COUNT: usize = 12;

    pub fn from_index(i: usize) -> Self {
        Attr {
            shape: Shape::ALL[i / 4],
            color: Color::ALL[i % 4],
        }
    }

    pub fn index(self) -> usize {
        self.shape as usize * 4 + self.color as usize
    }

    pub fn all() -> impl Iterator<Item = Attr> {
        (0..Self::COUNT).map(Self::from_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

impl Object {
    pub fn attr(&self) -> Attr {
        Attr {
            shape: self.shape,
            color: self.color,
        }
    }
}

/// One or two objects on distinct cells of a `grid_size × grid_size` grid,
/// kept sorted by row-major cell index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub grid_size: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    /// Checks the scene invariants: 1-2 objects, in range, distinct cells.
    pub fn is_legal(&self) -> bool {
        let g = self.grid_size;
        let n = self.objects.len();
        if !(1..=2).contains(&n) {
            return false;
        }
        if self.objects.iter().any(|o| o.row >= g || o.col >= g) {
            return false;
        }
        n == 1 || cell(g, &self.objects[0]) < cell(g, &self.objects[1])
    }

    pub fn object_at(&self, row: usize, col: usize) -> Option<&Object> {
        self.objects.iter().find(|o| o.row == row && o.col == col)
    }
}

fn cell(g: usize, o: &Object) -> usize {
    o.row * g + o.col
}

fn place(g: usize, attr: Attr, cell: usize) -> Object {
    Object {
        shape: attr.shape,
        color: attr.color,
        row: cell / g,
        col: cell % g,
    }
}

/// Number of legal scenes on a `g × g` grid.
pub fn scene_count(g: usize) -> usize {
    let cells = g * g;
    Attr::COUNT * cells + cells * cells.saturating_sub(1) / 2 * Attr::COUNT * Attr::COUNT
}

/// The `index`-th legal scene in a fixed enumeration order.
pub fn scene_from_index(g: usize, index: usize) -> Scene {
    let cells = g * g;
    let singles = Attr::COUNT * cells;
    let objects = if index < singles {
        vec![place(g, Attr::from_index(index / cells), index % cells)]
    } else {
        let j = index - singles;
        let attrs = j % (Attr::COUNT * Attr::COUNT);
        let mut pair = j / (Attr::COUNT * Attr::COUNT);
        let mut first = 0;
        while pair >= cells - 1 - first {
            pair -= cells - 1 - first;
            first += 1;
        }
        let second = first + 1 + pair;
        vec![
            place(g, Attr::from_index(attrs / Attr::COUNT), first),
            place(g, Attr::from_index(attrs % Attr::COUNT), second),
        ]
    };
    Scene {
        grid_size: g,
        objects,
    }
}

/// Iterates every legal scene exactly once.
pub fn all_scenes(g: usize) -> impl Iterator<Item = Scene> {
    (0..scene_count(g)).map(move |i| scene_from_index(g, i))
}

/// Uniformly random legal scene, fully determined by `seed`.
pub fn gen_scene(seed: u64, grid_size: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scene_from_index(grid_size, rng.random_range(0..scene_count(grid_size)))
}
