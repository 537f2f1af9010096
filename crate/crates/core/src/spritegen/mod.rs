//! Procedural sprite data with fully known generative factors.
//!
//! Five independent factors (shape, scale, orientation, x, y) drive a
//! hard-edged grayscale rasterizer. Concepts are boolean predicates on the
//! factors, and a task label is the conjunction of two predicates. Every
//! concept's ground-truth spatial extent is the sprite's own pixel mask.

mod dataset;
pub mod io;

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{generate_dataset, Dataset, DatasetSpec, SplitData, SpriteSample};

pub const SCALE_RANGE: (f64, f64) = (0.5, 1.0);
pub const POS_RANGE: (f64, f64) = (0.2, 0.8);
pub const SUPPORTED_SIZES: [usize; 3] = [16, 32, 64];

/// Side of an axis-aligned square at scale 1, as a fraction of image size.
/// Its half-diagonal (0.177) stays inside the 0.2 positional margin.
pub const SQUARE_SIDE_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Ellipse,
    Heart,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Heart];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Ellipse => "ellipse",
            Shape::Heart => "heart",
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown shape {s:?}")))
    }
}

/// The generative factors of one sprite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub shape: Shape,
    pub scale: f64,
    pub orientation: f64,
    pub x_pos: f64,
    pub y_pos: f64,
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name, value: f64, (lo, hi): (f64, f64), hi_open: bool| {
            let ok = value >= lo && if hi_open { value < hi } else { value <= hi };
            if ok {
                Ok(())
            } else {
                Err(Error::FactorRange { name, value, lo, hi })
            }
        };
        check("scale", self.scale, SCALE_RANGE, false)?;
        check("orientation", self.orientation, (0.0, TAU), true)?;
        check("x_pos", self.x_pos, POS_RANGE, false)?;
        check("y_pos", self.y_pos, POS_RANGE, false)
    }

    /// Draws every factor independently and uniformly over its range.
    pub fn sample(rng: &mut impl rand::Rng) -> Self {
        let shape = Shape::ALL[rng.random_range(0..3)];
        Self {
            shape,
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            orientation: rng.random_range(0.0..TAU),
            x_pos: rng.random_range(POS_RANGE.0..=POS_RANGE.1),
            y_pos: rng.random_range(POS_RANGE.0..=POS_RANGE.1),
        }
    }

    /// Numeric encoding `[shape index, scale, orientation, x, y]`.
    pub fn to_row(&self) -> [f64; 5] {
        [
            self.shape.index() as f64,
            self.scale,
            self.orientation,
            self.x_pos,
            self.y_pos,
        ]
    }

    pub fn from_row(row: &[f64]) -> Result<Self> {
        let shape = *Shape::ALL
            .get(row[0] as usize)
            .ok_or_else(|| Error::Format(format!("bad shape index {}", row[0])))?;
        Ok(Self {
            shape,
            scale: row[1],
            orientation: row[2],
            x_pos: row[3],
            y_pos: row[4],
        })
    }
}

/// Rasterized sprite: intensities in {0, 1} and the matching mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub size: usize,
    pub image: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Rendered {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Renders `factors` onto a `size × size` canvas by testing each pixel
/// center against the shape. Row 0 is the top; `y_pos` grows upward.
pub fn render_sprite(factors: &FactorSpec, size: usize) -> Result<Rendered> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(Error::Invalid(format!("image size {size} not in {SUPPORTED_SIZES:?}")));
    }
    factors.validate()?;
    let s = size as f64;
    let half = 0.5 * factors.scale * SQUARE_SIDE_FRACTION * s;
    let (cx, cy) = (factors.x_pos * s, (1.0 - factors.y_pos) * s);
    let (sin, cos) = factors.orientation.sin_cos();
    let mut mask = vec![false; size * size];
    for row in 0..size {
        for col in 0..size {
            let dx = col as f64 + 0.5 - cx;
            let dy = row as f64 + 0.5 - cy;
            // into the sprite frame, in units of the square's half-side
            let u = (cos * dx + sin * dy) / half;
            let v = (-sin * dx + cos * dy) / half;
            mask[row * size + col] = inside(factors.shape, u, v);
        }
    }
    let image = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(Rendered { size, image, mask })
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
        Shape::Ellipse => (u / 1.4).powi(2) + (v / 0.7).powi(2) <= 1.0,
        Shape::Heart => {
            // (x² + y² − 1)³ ≤ x²y³, lobes up (image rows grow downward)
            let (x, y) = (u / 1.1, -v / 1.1 + 0.1);
            let r = x * x + y * y - 1.0;
            r * r * r <= x * x * y * y * y
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Shape,
    Scale,
    Orientation,
    X,
    Y,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::Shape => "shape",
            Factor::Scale => "scale",
            Factor::Orientation => "orientation",
            Factor::X => "x",
            Factor::Y => "y",
        }
    }

    fn value(self, f: &FactorSpec) -> f64 {
        match self {
            Factor::Shape => f.shape.index() as f64,
            Factor::Scale => f.scale,
            Factor::Orientation => f.orientation,
            Factor::X => f.x_pos,
            Factor::Y => f.y_pos,
        }
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "shape" => Factor::Shape,
            "scale" => Factor::Scale,
            "orientation" => Factor::Orientation,
            "x" | "x_pos" => Factor::X,
            "y" | "y_pos" => Factor::Y,
            _ => return Err(Error::Invalid(format!("unknown factor {s:?}"))),
        })
    }
}

/// Exact match for the categorical factor, strict threshold otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Equals(Shape),
    Above(f64),
    Below(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub factor: Factor,
    pub criterion: Criterion,
}

impl Condition {
    pub fn new(factor: Factor, criterion: Criterion) -> Result<Self> {
        let categorical = factor == Factor::Shape;
        let equals = matches!(criterion, Criterion::Equals(_));
        if categorical != equals {
            return Err(Error::Invalid(format!(
                "{} needs {} criterion",
                factor.name(),
                if categorical { "an exact-value" } else { "a threshold" }
            )));
        }
        Ok(Self { factor, criterion })
    }

    /// Boundary values are false: thresholds are strict.
    pub fn holds(&self, f: &FactorSpec) -> bool {
        match self.criterion {
            Criterion::Equals(shape) => f.shape == shape,
            Criterion::Above(t) => self.factor.value(f) > t,
            Criterion::Below(t) => self.factor.value(f) < t,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.criterion {
            Criterion::Equals(s) => write!(f, "{}={}", self.factor.name(), s.name()),
            Criterion::Above(t) => write!(f, "{}>{}", self.factor.name(), t),
            Criterion::Below(t) => write!(f, "{}<{}", self.factor.name(), t),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    /// `shape=square`, `x>0.5`, `scale<0.6`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (pos, op) = s
            .char_indices()
            .find(|(_, c)| matches!(c, '=' | '>' | '<'))
            .ok_or_else(|| Error::Invalid(format!("condition {s:?} has no '=', '>' or '<'")))?;
        let factor: Factor = s[..pos].trim().parse()?;
        let rhs = s[pos + 1..].trim();
        let threshold = || {
            rhs.parse::<f64>()
                .map_err(|_| Error::Invalid(format!("bad threshold {rhs:?} in {s:?}")))
        };
        let criterion = match op {
            '=' => Criterion::Equals(rhs.parse()?),
            '>' => Criterion::Above(threshold()?),
            _ => Criterion::Below(threshold()?),
        };
        Condition::new(factor, criterion)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDef {
    pub name: String,
    pub condition: Condition,
}

/// The six annotated concepts, in label order.
pub fn default_concepts() -> Vec<ConceptDef> {
    let c = |name: &str, factor, criterion| ConceptDef {
        name: name.to_string(),
        condition: Condition { factor, criterion },
    };
    vec![
        c("is_square", Factor::Shape, Criterion::Equals(Shape::Square)),
        c("is_ellipse", Factor::Shape, Criterion::Equals(Shape::Ellipse)),
        c("is_heart", Factor::Shape, Criterion::Equals(Shape::Heart)),
        c("is_large", Factor::Scale, Criterion::Above(0.75)),
        c("is_right", Factor::X, Criterion::Above(0.5)),
        c("is_top", Factor::Y, Criterion::Above(0.5)),
    ]
}

pub fn derive_concepts(factors: &FactorSpec, defs: &[ConceptDef]) -> Vec<bool> {
    defs.iter().map(|d| d.condition.holds(factors)).collect()
}

/// Binary task: label 1 iff both conditions hold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub a: Condition,
    pub b: Condition,
}

impl TaskDef {
    pub fn new(a: Condition, b: Condition) -> Result<Self> {
        if a.factor == b.factor {
            return Err(Error::Invalid(format!("task uses factor {} twice", a.factor.name())));
        }
        Ok(Self { a, b })
    }

    pub fn criterion_bits(&self, f: &FactorSpec) -> (bool, bool) {
        (self.a.holds(f), self.b.holds(f))
    }

    pub fn label(&self, f: &FactorSpec) -> u8 {
        let (a, b) = self.criterion_bits(f);
        derive_task_label(a, b)
    }

    /// Indices of annotated concepts whose conditions match the task's.
    pub fn concept_indices(&self, defs: &[ConceptDef]) -> Option<(usize, usize)> {
        let find = |c: &Condition| defs.iter().position(|d| d.condition == *c);
        Some((find(&self.a)?, find(&self.b)?))
    }
}

impl Default for TaskDef {
    /// Square sprites on the right half.
    fn default() -> Self {
        Self {
            a: Condition {
                factor: Factor::Shape,
                criterion: Criterion::Equals(Shape::Square),
            },
            b: Condition {
                factor: Factor::X,
                criterion: Criterion::Above(0.5),
            },
        }
    }
}

impl fmt::Display for TaskDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.a, self.b)
    }
}

impl FromStr for TaskDef {
    type Err = Error;

    /// Two comma-separated conditions, e.g. `shape=square,x>0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::Invalid(format!("task {s:?} needs exactly two conditions")));
        }
        TaskDef::new(parts[0].parse()?, parts[1].parse()?)
    }
}

pub fn derive_task_label(a: bool, b: bool) -> u8 {
    u8::from(a && b)
}

#[cfg(test)]
mod tests;
