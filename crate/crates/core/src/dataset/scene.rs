//! Deterministic two-object synthetic scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionedImage, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Object positions live on an 8×8 grid of 8-pixel cells; each object
/// covers the 2×2 block of cells whose top-left cell is its position.
pub const GRID: usize = 8;
pub const CELL: usize = IMAGE_SIZE / GRID;
const FOOTPRINT: usize = 2;
pub const MAX_CELL: usize = GRID - FOOTPRINT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const RELATIONS: [Relation; 4] = [Relation::Above, Relation::Below, Relation::LeftOf, Relation::RightOf];

/// Every word a synthetic caption can contain.
pub const TEMPLATE_WORDS: [&str; 13] = [
    "a", "red", "green", "blue", "yellow", "circle", "square", "triangle", "above", "below", "left", "right", "of",
];

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_name(word: &str) -> Option<Self> {
        SHAPES.into_iter().find(|s| s.name() == word)
    }

    /// Whether local pixel (ly, lx) of a 16×16 footprint is inside the shape.
    fn covers(self, ly: usize, lx: usize) -> bool {
        let side = (FOOTPRINT * CELL) as f64;
        let (cy, cx) = (ly as f64 + 0.5, lx as f64 + 0.5);
        let mid = side / 2.0;
        match self {
            ShapeKind::Square => (1..FOOTPRINT * CELL - 1).contains(&ly) && (1..FOOTPRINT * CELL - 1).contains(&lx),
            ShapeKind::Circle => (cy - mid).powi(2) + (cx - mid).powi(2) <= 6.8 * 6.8,
            ShapeKind::Triangle => {
                if !(1..FOOTPRINT * CELL - 1).contains(&ly) {
                    return false;
                }
                let height = side - 2.0;
                let t = (cy - 1.0) / height;
                (cx - mid).abs() <= t * height / 2.0
            }
        }
    }
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.75, 0.15],
            Color::Blue => [0.1, 0.15, 0.9],
            Color::Yellow => [0.9, 0.85, 0.1],
        }
    }
}

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
        }
    }

    /// Where `b` sits relative to `a`, phrased from `a`'s side: a column
    /// difference at least as large as the row difference gives left/right.
    pub fn between(a: (usize, usize), b: (usize, usize)) -> Self {
        let dr = b.0 as isize - a.0 as isize;
        let dc = b.1 as isize - a.1 as isize;
        if dc.abs() >= dr.abs() {
            if dc > 0 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if dr > 0 {
            Relation::Above
        } else {
            Relation::Below
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    /// (row, col) of the top-left grid cell of the object's 2×2-cell footprint.
    pub cell: (usize, usize),
}

/// Pixel bounding box, half-open: rows `top..bottom`, columns `left..right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Region {
    /// Indices (row-major over the 8×8 grid) of attention cells this region touches.
    pub fn grid_cells(&self) -> Vec<usize> {
        let rows = self.top / CELL..=(self.bottom - 1) / CELL;
        rows.flat_map(|r| (self.left / CELL..=(self.right - 1) / CELL).map(move |c| r * GRID + c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLayout {
    pub shape: ShapeKind,
    pub color: Color,
    pub region: Region,
}

/// Rendered object placement, in caption order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub objects: [ObjectLayout; 2],
}

impl SceneLayout {
    pub fn object_named(&self, shape: &str) -> Option<&ObjectLayout> {
        self.objects.iter().find(|o| o.shape.name() == shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Caption order: objects[0] is the sentence subject.
    pub objects: [SceneObject; 2],
    pub background: f64,
}

impl SceneSpec {
    pub fn new(seed: u64, first: SceneObject, second: SceneObject) -> Self {
        Self {
            seed,
            objects: [first, second],
            background: 0.9,
        }
    }

    /// The scene for `seed`. Relation cycles with `seed % 4`, the subject's
    /// shape with `seed % 3` and its color with `(seed / 4) % 4`, so any run of
    /// 20 consecutive seeds uses every template word. The rest is drawn from
    /// a ChaCha stream keyed by the seed; the two shapes always differ.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relation = RELATIONS[(seed % 4) as usize];
        let shape1 = SHAPES[(seed % 3) as usize];
        let color1 = COLORS[((seed / 4) % 4) as usize];
        let others: Vec<ShapeKind> = SHAPES.into_iter().filter(|&s| s != shape1).collect();
        let shape2 = others[rng.gen_range(0..others.len())];
        let color2 = COLORS[rng.gen_range(0..COLORS.len())];
        let background = rng.gen_range(0.82..0.96);
        let (cell1, cell2) = loop {
            let a = (rng.gen_range(0..=MAX_CELL), rng.gen_range(0..=MAX_CELL));
            let b = (rng.gen_range(0..=MAX_CELL), rng.gen_range(0..=MAX_CELL));
            if !footprints_overlap(a, b) && Relation::between(a, b) == relation {
                break (a, b);
            }
        };
        Self {
            seed,
            objects: [
                SceneObject {
                    shape: shape1,
                    color: color1,
                    cell: cell1,
                },
                SceneObject {
                    shape: shape2,
                    color: color2,
                    cell: cell2,
                },
            ],
            background,
        }
    }

    pub fn relation(&self) -> Relation {
        Relation::between(self.objects[0].cell, self.objects[1].cell)
    }

    pub fn caption(&self) -> String {
        let [a, b] = &self.objects;
        format!(
            "a {} {} {} a {} {}",
            a.color.name(),
            a.shape.name(),
            self.relation().phrase(),
            b.color.name(),
            b.shape.name()
        )
    }

    /// Same scene, described with the other object as subject.
    pub fn swapped(&self) -> Self {
        Self {
            seed: self.seed,
            objects: [self.objects[1], self.objects[0]],
            background: self.background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            if o.cell.0 > MAX_CELL || o.cell.1 > MAX_CELL {
                return Err(Error::Spec(format!(
                    "cell {:?} leaves no room for a 2×2 footprint on the {GRID}×{GRID} grid",
                    o.cell
                )));
            }
        }
        if footprints_overlap(self.objects[0].cell, self.objects[1].cell) {
            return Err(Error::Spec(format!(
                "objects at {:?} and {:?} overlap",
                self.objects[0].cell, self.objects[1].cell
            )));
        }
        if !(0.8..=1.0).contains(&self.background) {
            return Err(Error::Spec(format!("background {} outside [0.8, 1]", self.background)));
        }
        Ok(())
    }
}

fn footprints_overlap(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0.abs_diff(b.0) < FOOTPRINT && a.1.abs_diff(b.1) < FOOTPRINT
}

/// Render a 64×64 scene: flat bright background, two filled shapes, the
/// template caption and the exact pixel bounds of each shape.
pub fn generate_scene(spec: &SceneSpec) -> Result<CaptionedImage> {
    spec.validate()?;
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![spec.background; 3 * plane];
    let mut layouts = Vec::with_capacity(2);
    for obj in &spec.objects {
        let (y0, x0) = (obj.cell.0 * CELL, obj.cell.1 * CELL);
        let rgb = obj.color.rgb();
        let mut bounds = (usize::MAX, usize::MAX, 0, 0);
        for ly in 0..FOOTPRINT * CELL {
            for lx in 0..FOOTPRINT * CELL {
                if !obj.shape.covers(ly, lx) {
                    continue;
                }
                let (y, x) = (y0 + ly, x0 + lx);
                for (c, v) in rgb.iter().enumerate() {
                    data[c * plane + y * IMAGE_SIZE + x] = *v;
                }
                bounds = (bounds.0.min(y), bounds.1.min(x), bounds.2.max(y + 1), bounds.3.max(x + 1));
            }
        }
        layouts.push(ObjectLayout {
            shape: obj.shape,
            color: obj.color,
            region: Region {
                top: bounds.0,
                left: bounds.1,
                bottom: bounds.2,
                right: bounds.3,
            },
        });
    }
    let pixels = Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], data)?;
    let objects: [ObjectLayout; 2] = layouts.try_into().expect("two objects");
    Ok(CaptionedImage {
        pixels,
        captions: vec![spec.caption()],
        meta: Some(SceneLayout { objects }),
    })
}
