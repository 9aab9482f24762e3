//! Procedural 24×24 RGB dataset: one circle or square in one of three
//! colours over a grey gradient background.
//!
//! The background family does not depend on the class, so a class-conditional
//! model has to place all of its condition-specific signal inside the shape.
//! Every sample carries its ground-truth region, which the editing benchmark
//! uses to split background from edit region.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::Condition;
use crate::tensor::{Latent, SeededRng, Shape, SpatialMap};

pub const IMAGE_SIZE: usize = 24;
pub const IMAGE_CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 6;

pub fn image_shape() -> Shape {
    Shape::new(IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    /// The dominant channel of the colour.
    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.85, 0.2],
            Color::Blue => [0.15, 0.2, 0.9],
        }
    }

    pub fn next(self) -> Color {
        Color::ALL[(self as usize + 1) % 3]
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

/// A (shape, colour) class; its token is `shape * 3 + colour`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeClass {
    pub shape: ShapeKind,
    pub color: Color,
}

impl ShapeClass {
    pub fn from_token(token: u32) -> Option<Self> {
        if token as usize >= NUM_CLASSES {
            return None;
        }
        let shape = if token < 3 {
            ShapeKind::Circle
        } else {
            ShapeKind::Square
        };
        Some(Self {
            shape,
            color: Color::ALL[token as usize % 3],
        })
    }

    pub fn token(self) -> u32 {
        (self.shape as u32) * 3 + self.color as u32
    }

    pub fn condition(self) -> Condition {
        Condition::token(self.token())
    }

    pub fn with_color(self, color: Color) -> Self {
        Self { color, ..self }
    }

    /// `red_circle`, `blue_square`, …
    pub fn name(self) -> String {
        let shape = match self.shape {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
        };
        format!("{}_{}", self.color.name(), shape)
    }

    pub fn parse(name: &str) -> Result<Self> {
        (0..NUM_CLASSES as u32)
            .filter_map(ShapeClass::from_token)
            .find(|c| c.name() == name)
            .ok_or_else(|| invalid(format!("unknown condition '{name}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesSample {
    pub image: Latent,
    pub class: ShapeClass,
    /// 1 on the shape's pixels, 0 elsewhere.
    pub region_mask: SpatialMap,
}

impl ShapesSample {
    pub fn condition(&self) -> Condition {
        self.class.condition()
    }
}

/// `n` samples, deterministic per `seed`. For `n >= 6` the first six samples
/// are a permutation of all classes; later classes are drawn uniformly.
pub fn gen_shapes_dataset(n: usize, seed: u64) -> Result<Vec<ShapesSample>> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let mut rng = SeededRng::new(seed);
    let mut first: Vec<u32> = (0..NUM_CLASSES as u32).collect();
    rng.shuffle(&mut first);
    Ok((0..n)
        .map(|k| {
            let token = if k < NUM_CLASSES {
                first[k]
            } else {
                rng.below(NUM_CLASSES) as u32
            };
            draw_sample(ShapeClass::from_token(token).unwrap(), &mut rng)
        })
        .collect())
}

fn draw_sample(class: ShapeClass, rng: &mut SeededRng) -> ShapesSample {
    let size = IMAGE_SIZE as f64;
    let base = rng.uniform_range(0.3, 0.55);
    let gx = rng.uniform_range(-0.15, 0.15);
    let gy = rng.uniform_range(-0.15, 0.15);
    let radius = rng.uniform_range(4.0, 7.0);
    let margin = radius + 1.0;
    let cx = rng.uniform_range(margin, size - 1.0 - margin);
    let cy = rng.uniform_range(margin, size - 1.0 - margin);
    let half = 0.9 * radius;

    let inside = |h: usize, w: usize| {
        let (x, y) = (w as f64, h as f64);
        match class.shape {
            ShapeKind::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius,
            ShapeKind::Square => (x - cx).abs() <= half && (y - cy).abs() <= half,
        }
    };
    let mask: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|k| {
            if inside(k / IMAGE_SIZE, k % IMAGE_SIZE) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let region_mask = SpatialMap::from_vec(IMAGE_SIZE, IMAGE_SIZE, mask).unwrap();
    let rgb = class.color.rgb();
    let image = Latent::from_fn(image_shape(), |c, h, w| {
        if region_mask.get(h, w) > 0.5 {
            rgb[c]
        } else {
            let u = w as f64 / (size - 1.0) - 0.5;
            let v = h as f64 / (size - 1.0) - 0.5;
            base + gx * u + gy * v
        }
    });
    ShapesSample {
        image,
        class,
        region_mask,
    }
}

/// Two well-separated 2-D Gaussian classes as `[2, 1, 1]` latents; token 0
/// sits at `(-1.5, -1)`, token 1 at `(1.5, 1)`, both with std 0.3.
pub fn gen_two_gaussians(n: usize, seed: u64) -> Result<Vec<(Latent, Condition)>> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let mut rng = SeededRng::new(seed);
    Ok((0..n)
        .map(|k| {
            let token = (k % 2) as u32;
            let sign = if token == 0 { -1.0 } else { 1.0 };
            let x = sign * 1.5 + 0.3 * rng.normal();
            let y = sign * 1.0 + 0.3 * rng.normal();
            (Latent::from_channels(&[x, y]), Condition::token(token))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = gen_shapes_dataset(60, 7).unwrap();
        let b = gen_shapes_dataset(60, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_shapes_dataset(60, 8).unwrap());
    }

    #[test]
    fn regions_are_strict_subsets() {
        for s in gen_shapes_dataset(200, 3).unwrap() {
            let n = s
                .region_mask
                .as_slice()
                .iter()
                .filter(|&&m| m > 0.5)
                .count();
            assert!(n > 0 && n < IMAGE_SIZE * IMAGE_SIZE);
            assert!(s.image.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn all_classes_represented() {
        let data = gen_shapes_dataset(6, 99).unwrap();
        let mut tokens: Vec<u32> = data.iter().map(|s| s.class.token()).collect();
        tokens.sort();
        assert_eq!(tokens, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn class_histogram_regression() {
        let mut counts = [0usize; NUM_CLASSES];
        for s in gen_shapes_dataset(600, 7).unwrap() {
            counts[s.class.token() as usize] += 1;
        }
        assert!(
            counts.iter().all(|&c| (60..=140).contains(&c)),
            "{counts:?}"
        );
        // frozen from the generator
        assert_eq!(counts, FROZEN_HISTOGRAM);
    }

    const FROZEN_HISTOGRAM: [usize; NUM_CLASSES] = [114, 90, 92, 111, 83, 110];

    #[test]
    fn names_roundtrip() {
        for t in 0..NUM_CLASSES as u32 {
            let c = ShapeClass::from_token(t).unwrap();
            assert_eq!(ShapeClass::parse(&c.name()).unwrap(), c);
            assert_eq!(c.token(), t);
        }
        assert_eq!(ShapeClass::parse("red_circle").unwrap().token(), 0);
        assert!(ShapeClass::parse("purple_circle").is_err());
    }

    #[test]
    fn region_pixels_carry_class_color() {
        let s = &gen_shapes_dataset(10, 1).unwrap()[4];
        let rgb = s.class.color.rgb();
        for h in 0..IMAGE_SIZE {
            for w in 0..IMAGE_SIZE {
                if s.region_mask.get(h, w) > 0.5 {
                    for c in 0..3 {
                        assert_eq!(s.image.get(c, h, w), rgb[c]);
                    }
                }
            }
        }
    }
}
