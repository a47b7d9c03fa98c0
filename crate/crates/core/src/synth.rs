//! Class-structured synthetic sketches.
//!
//! Each class is a fixed multiset of stroke primitives (arc, zigzag, spiral,
//! ...) with a class-specific placement for each. An instance draws every
//! primitive as its own stroke, perturbs its placement, size and direction,
//! adds point jitter, and shuffles the stroke order. Optional distractor
//! scribbles are shared by all classes. Output is in the same form as parsed
//! QuickDraw records: integer coordinates scaled into `0..=255`.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sketch_data::{drawing_to_line, Point, RawDrawing};
use crate::tensor::{rng_for, Rng};

/// Every stroke is resampled to this many points, so point counts carry no
/// class information.
pub const POINTS_PER_STROKE: usize = 16;

/// Primitive stroke shapes, mostly in coarse and fine pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Line,
    Bend,
    Arc,
    Hook,
    Circle,
    Loops,
    Zigzag,
    FineZigzag,
    SquareWave,
    FineSquareWave,
    Spiral,
    TightSpiral,
    Sawtooth,
    FineSawtooth,
    Corner,
    UShape,
    SCurve,
    Wave,
    Triangle,
    Square,
}

/// Evenly spaced samples of `f` over `[0, 1]`.
fn curve(n: usize, f: impl Fn(f64) -> (f64, f64)) -> Vec<(f64, f64)> {
    (0..n).map(|i| f(i as f64 / (n - 1) as f64)).collect()
}

/// Alternating up/down corners across the unit width.
fn teeth(n: usize, amp: f64) -> Vec<(f64, f64)> {
    (0..=n)
        .map(|i| {
            (
                i as f64 / n as f64 - 0.5,
                if i % 2 == 0 { -amp } else { amp },
            )
        })
        .collect()
}

fn square_wave(n: usize, amp: f64) -> Vec<(f64, f64)> {
    let w = 1.0 / n as f64;
    let mut pts = vec![(-0.5, -amp)];
    for t in 0..n {
        let y = if t % 2 == 0 { amp } else { -amp };
        let x = -0.5 + t as f64 * w;
        pts.push((x, y));
        pts.push((x + w, y));
    }
    pts
}

fn sawtooth(n: usize, amp: f64) -> Vec<(f64, f64)> {
    let w = 1.0 / n as f64;
    let mut pts = Vec::new();
    for t in 0..n {
        let x = -0.5 + t as f64 * w;
        pts.push((x, -amp));
        pts.push((x + w, amp));
    }
    pts.push((0.5, -amp));
    pts
}

fn polygon(sides: usize) -> Vec<(f64, f64)> {
    curve(sides + 1, |t| {
        let a = TAU * t + PI / 2.0;
        (0.5 * a.cos(), 0.5 * a.sin())
    })
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::Line,
        Primitive::Bend,
        Primitive::Arc,
        Primitive::Hook,
        Primitive::Circle,
        Primitive::Loops,
        Primitive::Zigzag,
        Primitive::FineZigzag,
        Primitive::SquareWave,
        Primitive::FineSquareWave,
        Primitive::Spiral,
        Primitive::TightSpiral,
        Primitive::Sawtooth,
        Primitive::FineSawtooth,
        Primitive::Corner,
        Primitive::UShape,
        Primitive::SCurve,
        Primitive::Wave,
        Primitive::Triangle,
        Primitive::Square,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Line => "line",
            Primitive::Bend => "bend",
            Primitive::Arc => "arc",
            Primitive::Hook => "hook",
            Primitive::Circle => "circle",
            Primitive::Loops => "loops",
            Primitive::Zigzag => "zigzag",
            Primitive::FineZigzag => "fine_zigzag",
            Primitive::SquareWave => "squarewave",
            Primitive::FineSquareWave => "fine_squarewave",
            Primitive::Spiral => "spiral",
            Primitive::TightSpiral => "tight_spiral",
            Primitive::Sawtooth => "sawtooth",
            Primitive::FineSawtooth => "fine_sawtooth",
            Primitive::Corner => "corner",
            Primitive::UShape => "u_shape",
            Primitive::SCurve => "scurve",
            Primitive::Wave => "wave",
            Primitive::Triangle => "triangle",
            Primitive::Square => "square",
        }
    }

    /// Polyline in a unit frame centred near the origin.
    fn outline(self, rng: &mut Rng) -> Vec<(f64, f64)> {
        match self {
            Primitive::Line => vec![(-0.5, 0.0), (0.5, 0.0)],
            Primitive::Bend => {
                let a: f64 = rng.random_range(0.5..0.9);
                vec![(-0.5, 0.0), (0.0, 0.0), (0.5 * a.cos(), 0.5 * a.sin())]
            }
            Primitive::Arc => {
                let span = rng.random_range(0.8..1.1) * PI;
                curve(12, |t| (0.5 * (span * t).cos(), 0.5 * (span * t).sin()))
            }
            Primitive::Hook => curve(16, |t| {
                let a = 1.6 * PI * t;
                (0.5 * a.cos(), 0.5 * a.sin() + 0.6 * (1.0 - t).powi(4))
            }),
            Primitive::Circle => curve(16, |t| (0.5 * (TAU * t).cos(), 0.5 * (TAU * t).sin())),
            Primitive::Loops => curve(32, |t| {
                let a = 2.0 * TAU * t;
                (0.3 * a.cos() + 0.4 * (t - 0.5), 0.3 * a.sin())
            }),
            Primitive::Zigzag => teeth(3, 0.25),
            Primitive::FineZigzag => teeth(7, 0.25),
            Primitive::SquareWave => square_wave(2, 0.2),
            Primitive::FineSquareWave => square_wave(5, 0.2),
            Primitive::Spiral => curve(24, |t| {
                let a = 2.0 * PI * t;
                ((0.1 + 0.4 * t) * a.cos(), (0.1 + 0.4 * t) * a.sin())
            }),
            Primitive::TightSpiral => curve(40, |t| {
                let a = 5.0 * PI * t;
                ((0.05 + 0.45 * t) * a.cos(), (0.05 + 0.45 * t) * a.sin())
            }),
            Primitive::Sawtooth => sawtooth(2, 0.2),
            Primitive::FineSawtooth => sawtooth(5, 0.2),
            Primitive::Corner => vec![(-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)],
            Primitive::UShape => vec![(-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5), (0.5, 0.5)],
            Primitive::SCurve => curve(16, |t| (t - 0.5, 0.25 * (TAU * t).sin())),
            Primitive::Wave => curve(32, |t| (t - 0.5, 0.2 * (3.0 * TAU * t).sin())),
            Primitive::Triangle => polygon(3),
            Primitive::Square => polygon(4),
        }
    }
}

/// Where a class draws one of its parts, in drawing units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    pub scale: f64,
}

/// Synthetic class catalogue: class `c` is a multiset of primitives, each at a
/// class-specific placement.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClasses {
    recipes: Vec<Vec<Primitive>>,
    layouts: Vec<Vec<Placement>>,
    distractors: usize,
    noise: f64,
}

impl SynthClasses {
    /// `n` distinct classes of `parts` primitives each, chosen by `seed`.
    pub fn new(n: usize, parts: usize, seed: u64) -> Result<Self> {
        if parts == 0 {
            return Err(Error::invalid("classes need at least one primitive"));
        }
        let mut all: Vec<Vec<Primitive>> = Vec::new();
        multisets(parts, 0, &mut Vec::new(), &mut all);
        if n == 0 || n > all.len() {
            return Err(Error::invalid(format!(
                "can build 1..={} classes of {parts} primitives, asked for {n}",
                all.len()
            )));
        }
        all.shuffle(&mut rng_for(seed, 0xc1a55));
        all.truncate(n);
        let layouts = (0..n)
            .map(|class| {
                let mut rng = rng_for(seed, 0x1a40 + class as u64);
                (0..parts)
                    .map(|_| Placement {
                        x: rng.random_range(-0.5..0.5),
                        y: rng.random_range(-0.5..0.5),
                        angle: rng.random_range(0.0..TAU),
                        scale: rng.random_range(0.3..0.6),
                    })
                    .collect()
            })
            .collect();
        Ok(SynthClasses {
            recipes: all,
            layouts,
            distractors: 0,
            noise: 1.0,
        })
    }

    /// Adds `n` class-independent scribble strokes to every drawing.
    pub fn with_distractors(mut self, n: usize) -> Self {
        self.distractors = n;
        self
    }

    /// Scales the per-instance placement perturbation (default 1).
    pub fn with_placement_noise(mut self, factor: f64) -> Self {
        self.noise = factor;
        self
    }

    pub fn len(&self) -> usize {
        self.recipes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recipes.is_empty()
    }

    pub fn recipe(&self, class: usize) -> &[Primitive] {
        &self.recipes[class]
    }

    pub fn layout(&self, class: usize) -> &[Placement] {
        &self.layouts[class]
    }

    /// Readable class name, e.g. `arc+zigzag+zigzag`.
    pub fn name(&self, class: usize) -> String {
        self.recipes[class]
            .iter()
            .map(|p| p.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    /// One random instance of `class`.
    pub fn draw(&self, class: usize, rng: &mut Rng) -> Result<RawDrawing> {
        let recipe = self.recipes.get(class).ok_or(Error::IndexOutOfRange {
            index: class,
            size: self.recipes.len(),
        })?;
        let jitter = Normal::new(0.0, 0.02).expect("valid std");
        let shift =
            Normal::new(0.0, 0.06 * self.noise).map_err(|e| Error::invalid(e.to_string()))?;
        let tilt =
            Normal::new(0.0, 0.25 * self.noise).map_err(|e| Error::invalid(e.to_string()))?;
        let mut parts: Vec<(Vec<(f64, f64)>, Placement)> = recipe
            .iter()
            .zip(&self.layouts[class])
            .map(|(p, at)| {
                let at = Placement {
                    x: at.x + shift.sample(rng),
                    y: at.y + shift.sample(rng),
                    angle: at.angle + tilt.sample(rng),
                    scale: at.scale * rng.random_range(0.85..1.15),
                };
                (p.outline(rng), at)
            })
            .collect();
        for _ in 0..self.distractors {
            let at = Placement {
                x: rng.random_range(-0.5..0.5),
                y: rng.random_range(-0.5..0.5),
                angle: rng.random_range(0.0..TAU),
                scale: rng.random_range(0.3..0.6),
            };
            parts.push((scribble(rng), at));
        }
        let mut strokes: Vec<Vec<(f64, f64)>> = parts
            .iter()
            .map(|(outline, at)| {
                let mut pts = resample(outline, POINTS_PER_STROKE);
                if rng.random_bool(0.2) {
                    pts.reverse();
                }
                let stretch = rng.random_range(0.9..1.1);
                let (s, c) = at.angle.sin_cos();
                pts.iter()
                    .map(|&(x, y)| {
                        let (x, y) = (x + jitter.sample(rng), y + jitter.sample(rng));
                        let (x, y) = (x * at.scale * stretch, y * at.scale / stretch);
                        (at.x + c * x - s * y, at.y + s * x + c * y)
                    })
                    .collect()
            })
            .collect();
        strokes.shuffle(rng);
        to_canvas(&strokes, self.name(class))
    }

    /// `per_class` instances of every class, class-major order.
    pub fn dataset(&self, per_class: usize, seed: u64) -> Result<Vec<RawDrawing>> {
        let mut out = Vec::with_capacity(per_class * self.len());
        for class in 0..self.len() {
            let mut rng = rng_for(seed, 1000 + class as u64);
            for _ in 0..per_class {
                out.push(self.draw(class, &mut rng)?);
            }
        }
        Ok(out)
    }

    /// Writes a dataset in the raw newline-delimited JSON drawing format.
    pub fn write_ndjson(&self, per_class: usize, seed: u64, path: &std::path::Path) -> Result<()> {
        let mut text = String::new();
        for d in self.dataset(per_class, seed)? {
            text.push_str(&drawing_to_line(&d));
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Smooth random walk of unit length, shared by all classes.
fn scribble(rng: &mut Rng) -> Vec<(f64, f64)> {
    let turn = Normal::new(0.0, 0.5).expect("valid std");
    let mut heading = rng.random_range(0.0..TAU);
    let mut pts = vec![(0.0, 0.0)];
    for _ in 0..15 {
        heading += turn.sample(rng);
        let (x, y) = pts[pts.len() - 1];
        pts.push((x + heading.cos() / 15.0, y + heading.sin() / 15.0));
    }
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + p.0 / 16.0, a.1 + p.1 / 16.0));
    pts.iter().map(|p| (p.0 - mx, p.1 - my)).collect()
}

/// `n` points evenly spaced by arc length along a polyline.
fn resample(pts: &[(f64, f64)], n: usize) -> Vec<(f64, f64)> {
    let seg: Vec<f64> = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
        .collect();
    let total: f64 = seg.iter().sum();
    let mut out = Vec::with_capacity(n);
    let (mut i, mut acc) = (0, 0.0);
    for k in 0..n {
        let target = total * k as f64 / (n - 1) as f64;
        while i + 1 < seg.len() && acc + seg[i] < target {
            acc += seg[i];
            i += 1;
        }
        let t = if seg[i] > 0.0 {
            ((target - acc) / seg[i]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (pts[i], pts[i + 1]);
        out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
    }
    out
}

fn multisets(parts: usize, from: usize, cur: &mut Vec<Primitive>, out: &mut Vec<Vec<Primitive>>) {
    if cur.len() == parts {
        out.push(cur.clone());
        return;
    }
    for i in from..Primitive::ALL.len() {
        cur.push(Primitive::ALL[i]);
        multisets(parts, i, cur, out);
        cur.pop();
    }
}

/// Scales into `0..=255` preserving aspect, rounds, and drops repeated points.
fn to_canvas(strokes: &[Vec<(f64, f64)>], label: String) -> Result<RawDrawing> {
    let all = strokes.iter().flatten();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let out = strokes
        .iter()
        .map(|s| {
            let mut pts: Vec<Point> = Vec::with_capacity(s.len());
            for &(x, y) in s {
                let p = (
                    ((x - x0) / span * 255.0).round().clamp(0.0, 255.0) as u8,
                    ((y - y0) / span * 255.0).round().clamp(0.0, 255.0) as u8,
                );
                if pts.last() != Some(&p) {
                    pts.push(p);
                }
            }
            pts
        })
        .collect();
    RawDrawing::new(out, label)
}
