//! Stroke drawings: parsing, flattening into flagged key points, padding to a
//! fixed length, dataset splits and summary statistics.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rng_for, Rng};

/// Canvas coordinate, `0..=255` on both axes.
pub type Point = (u8, u8);

/// Coordinate written at padding positions.
pub const PAD_COORD: f32 = -1.0;

/// One drawing as an ordered list of strokes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDrawing {
    strokes: Vec<Vec<Point>>,
    label: String,
}

impl RawDrawing {
    pub fn new(strokes: Vec<Vec<Point>>, label: impl Into<String>) -> Result<Self> {
        if strokes.is_empty() {
            return Err(Error::InvalidDrawing("drawing has no strokes".into()));
        }
        if let Some(i) = strokes.iter().position(Vec::is_empty) {
            return Err(Error::InvalidDrawing(format!("stroke {i} has no points")));
        }
        Ok(RawDrawing {
            strokes,
            label: label.into(),
        })
    }

    pub fn strokes(&self) -> &[Vec<Point>] {
        &self.strokes
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn num_points(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }
}

#[derive(Deserialize)]
struct QuickDrawRecord {
    word: String,
    drawing: Vec<Vec<Vec<i64>>>,
}

/// Parses one line of the QuickDraw simplified-drawing format. `line_no` is
/// only used in error messages.
pub fn parse_drawing_line(line: &str, line_no: usize) -> Result<RawDrawing> {
    let perr = |msg: String| Error::Parse { line: line_no, msg };
    let rec: QuickDrawRecord =
        serde_json::from_str(line).map_err(|e| perr(format!("malformed record: {e}")))?;
    if rec.drawing.is_empty() {
        return Err(Error::EmptyDrawing { line: line_no });
    }
    let mut strokes = Vec::with_capacity(rec.drawing.len());
    for (si, stroke) in rec.drawing.iter().enumerate() {
        // Raw-format records carry a third (timing) list; only x and y are used.
        let [xs, ys, ..] = stroke.as_slice() else {
            return Err(perr(format!("stroke {si} needs x and y lists")));
        };
        if xs.len() != ys.len() {
            return Err(perr(format!(
                "stroke {si} has {} x values and {} y values",
                xs.len(),
                ys.len()
            )));
        }
        if xs.is_empty() {
            return Err(perr(format!("stroke {si} has no points")));
        }
        let mut pts = Vec::with_capacity(xs.len());
        for (&x, &y) in xs.iter().zip(ys) {
            let conv = |v: i64| {
                u8::try_from(v).map_err(|_| perr(format!("coordinate {v} outside [0, 255]")))
            };
            pts.push((conv(x)?, conv(y)?));
        }
        strokes.push(pts);
    }
    RawDrawing::new(strokes, rec.word).map_err(|e| perr(e.to_string()))
}

/// Serializes a drawing back into the QuickDraw simplified format.
pub fn drawing_to_line(drawing: &RawDrawing) -> String {
    let strokes: Vec<[Vec<u8>; 2]> = drawing
        .strokes
        .iter()
        .map(|s| {
            [
                s.iter().map(|p| p.0).collect(),
                s.iter().map(|p| p.1).collect(),
            ]
        })
        .collect();
    serde_json::json!({ "word": drawing.label, "drawing": strokes }).to_string()
}

/// Pen state of a key point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Flag {
    /// Starting or ongoing point of a stroke.
    Ongoing = 0,
    /// Last point of a stroke.
    StrokeEnd = 1,
    Padding = 2,
}

impl Flag {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Flag::Ongoing),
            1 => Some(Flag::StrokeEnd),
            2 => Some(Flag::Padding),
            _ => None,
        }
    }
}

/// Variable-length flattened drawing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPointSequence {
    pub points: Vec<Point>,
    pub flags: Vec<Flag>,
    pub stroke_ids: Vec<usize>,
}

impl KeyPointSequence {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Concatenates strokes in temporal order, flagging each stroke's last point.
pub fn flatten(drawing: &RawDrawing) -> KeyPointSequence {
    let n = drawing.num_points();
    let mut seq = KeyPointSequence {
        points: Vec::with_capacity(n),
        flags: Vec::with_capacity(n),
        stroke_ids: Vec::with_capacity(n),
    };
    for (sid, stroke) in drawing.strokes.iter().enumerate() {
        for (i, &p) in stroke.iter().enumerate() {
            seq.points.push(p);
            seq.flags.push(if i + 1 == stroke.len() {
                Flag::StrokeEnd
            } else {
                Flag::Ongoing
            });
            seq.stroke_ids.push(sid);
        }
    }
    seq
}

/// Fixed-length sketch ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchTensor {
    pub coords: Vec<[f32; 2]>,
    pub flags: Vec<Flag>,
    pub true_len: usize,
    /// Stroke index per point, `-1` at padding.
    pub stroke_ids: Vec<i32>,
    pub label: usize,
    /// Key-point count before truncation.
    pub original_len: usize,
}

impl SketchTensor {
    pub fn seq_len(&self) -> usize {
        self.coords.len()
    }

    /// Temporal positions `0..S`.
    pub fn positions(&self) -> impl Iterator<Item = usize> {
        0..self.coords.len()
    }

    pub fn is_padding(&self, s: usize) -> bool {
        s >= self.true_len
    }

    pub fn was_truncated(&self) -> bool {
        self.original_len > self.true_len
    }

    /// Validates the padding and flag invariants.
    pub fn validate(&self) -> Result<()> {
        let s = self.coords.len();
        let bad = |m: String| Err(Error::InvalidDrawing(m));
        if self.flags.len() != s || self.stroke_ids.len() != s {
            return bad("field lengths differ".into());
        }
        if self.true_len == 0 || self.true_len > s {
            return bad(format!("true_len {} outside [1, {s}]", self.true_len));
        }
        for i in 0..s {
            let pad = i >= self.true_len;
            let coord_pad = self.coords[i] == [PAD_COORD, PAD_COORD];
            if pad != (self.flags[i] == Flag::Padding)
                || pad != (self.stroke_ids[i] == -1)
                || pad != coord_pad
            {
                return bad(format!("padding fields disagree at position {i}"));
            }
            if !pad && i > 0 && self.stroke_ids[i] < self.stroke_ids[i - 1] {
                return bad(format!("stroke ids decrease at position {i}"));
            }
        }
        Ok(())
    }
}

/// Keeps the first `s` points (each retaining its flag) or pads with
/// `(-1, -1)` / padding flag / stroke `-1` up to `s`.
pub fn pad_truncate(seq: &KeyPointSequence, s: usize, label: usize) -> Result<SketchTensor> {
    if seq.is_empty() || s == 0 {
        return Err(Error::invalid(
            "pad_truncate needs a non-empty sequence and S >= 1",
        ));
    }
    let keep = seq.len().min(s);
    let mut t = SketchTensor {
        coords: Vec::with_capacity(s),
        flags: Vec::with_capacity(s),
        true_len: keep,
        stroke_ids: Vec::with_capacity(s),
        label,
        original_len: seq.len(),
    };
    for i in 0..keep {
        let (x, y) = seq.points[i];
        t.coords.push([f32::from(x), f32::from(y)]);
        t.flags.push(seq.flags[i]);
        t.stroke_ids.push(seq.stroke_ids[i] as i32);
    }
    t.coords.resize(s, [PAD_COORD, PAD_COORD]);
    t.flags.resize(s, Flag::Padding);
    t.stroke_ids.resize(s, -1);
    Ok(t)
}

/// Flatten and pad in one step.
pub fn to_sketch_tensor(drawing: &RawDrawing, s: usize, label: usize) -> Result<SketchTensor> {
    pad_truncate(&flatten(drawing), s, label)
}

/// Dense class-name to index map.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LabelVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    /// Sorted, de-duplicated vocabulary.
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        let names: Vec<String> = set.into_iter().collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        LabelVocabulary { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One class name per line; the line number is the index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for n in &self.names {
            writeln!(f, "{n}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names: Vec<String> = text.lines().map(str::to_string).collect();
        let index: HashMap<String, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        if index.len() != names.len() {
            return Err(Error::invalid(format!(
                "duplicate class names in {}",
                path.display()
            )));
        }
        Ok(LabelVocabulary { names, index })
    }
}

/// Samples per class for each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl std::str::FromStr for SplitCounts {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [a, b, c] = parts.as_slice() else {
            return Err(format!("expected `train,val,test`, got `{s}`"));
        };
        let num = |v: &str| v.parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        Ok(SplitCounts {
            train: num(a)?,
            val: num(b)?,
            test: num(c)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SketchTensor>,
    pub val: Vec<SketchTensor>,
    pub test: Vec<SketchTensor>,
    pub seed: u64,
    pub counts: SplitCounts,
}

/// Draws disjoint per-class train/val/test subsets. Every class of `vocab`
/// must have at least `counts.total()` samples.
pub fn split_dataset(
    samples: Vec<SketchTensor>,
    counts: SplitCounts,
    seed: u64,
    vocab: &LabelVocabulary,
) -> Result<DatasetSplit> {
    let mut by_class: Vec<Vec<SketchTensor>> = vec![Vec::new(); vocab.len()];
    for s in samples {
        let slot = by_class.get_mut(s.label).ok_or(Error::IndexOutOfRange {
            index: s.label,
            size: vocab.len(),
        })?;
        slot.push(s);
    }
    let mut split = DatasetSplit {
        train: Vec::with_capacity(counts.train * vocab.len()),
        val: Vec::with_capacity(counts.val * vocab.len()),
        test: Vec::with_capacity(counts.test * vocab.len()),
        seed,
        counts,
    };
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < counts.total() {
            return Err(Error::InsufficientSamples {
                class: vocab.name(class).unwrap_or("?").to_string(),
                available: members.len(),
                required: counts.total(),
            });
        }
        let mut rng = rng_for(seed, class as u64);
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        split.train.extend(it.by_ref().take(counts.train));
        split.val.extend(it.by_ref().take(counts.val));
        split.test.extend(it.by_ref().take(counts.test));
    }
    Ok(split)
}

/// Key-point statistics of one set of sketches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub truncated: usize,
    pub truncated_ratio: f64,
    pub max: usize,
    pub min: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn dataset_stats(samples: &[SketchTensor]) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(Error::invalid("statistics of an empty set"));
    }
    let n = samples.len() as f64;
    let lens: Vec<usize> = samples.iter().map(|s| s.true_len).collect();
    let mean = lens.iter().sum::<usize>() as f64 / n;
    let var = lens.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
    let truncated = samples.iter().filter(|s| s.was_truncated()).count();
    Ok(DatasetStats {
        samples: samples.len(),
        truncated,
        truncated_ratio: truncated as f64 / n,
        max: *lens.iter().max().unwrap(),
        min: *lens.iter().min().unwrap(),
        mean,
        std: var.sqrt(),
    })
}

/// Statistics table for a whole split, one row per set.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitStatsTable(pub Vec<(String, DatasetStats)>);

impl SplitStatsTable {
    pub fn for_split(split: &DatasetSplit) -> Result<Self> {
        let mut rows = Vec::new();
        for (name, set) in [
            ("Training", &split.train),
            ("Validation", &split.val),
            ("Test", &split.test),
        ] {
            if !set.is_empty() {
                rows.push((name.to_string(), dataset_stats(set)?));
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid("statistics of an empty split"));
        }
        Ok(SplitStatsTable(rows))
    }
}

impl fmt::Display for SplitStatsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10}  {:>9}  {:>18}  {:>4}  {:>4}  {:>6}  {:>6}",
            "set", "samples", "truncated (ratio)", "max", "min", "mean", "std"
        )?;
        for (name, s) in &self.0 {
            let trunc = format!("{} ({:.2}%)", s.truncated, 100.0 * s.truncated_ratio);
            writeln!(
                f,
                "{:<10}  {:>9}  {:>18}  {:>4}  {:>4}  {:>6.2}  {:>6.2}",
                name, s.samples, trunc, s.max, s.min, s.mean, s.std
            )?;
        }
        Ok(())
    }
}

/// Line format of prepared dataset files.
#[derive(Serialize, Deserialize)]
struct SketchRecord {
    label_idx: usize,
    true_len: usize,
    coords: Vec<[f32; 2]>,
    flags: Vec<u8>,
    stroke_ids: Vec<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    orig_len: Option<usize>,
}

pub fn write_dataset(path: &Path, samples: &[SketchTensor]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let rec = SketchRecord {
            label_idx: s.label,
            true_len: s.true_len,
            coords: s.coords.clone(),
            flags: s.flags.iter().map(|f| f.code()).collect(),
            stroke_ids: s.stroke_ids.clone(),
            orig_len: Some(s.original_len),
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SketchTensor>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: i + 1, msg };
        let rec: SketchRecord = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        let flags = rec
            .flags
            .iter()
            .map(|&c| Flag::from_code(c).ok_or_else(|| perr(format!("bad flag code {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let t = SketchTensor {
            coords: rec.coords,
            flags,
            true_len: rec.true_len,
            stroke_ids: rec.stroke_ids,
            label: rec.label_idx,
            original_len: rec.orig_len.unwrap_or(rec.true_len),
        };
        t.validate().map_err(|e| perr(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

/// Random-walk drawing for fixtures and property tests.
pub fn synthesize_sketch(
    rng: &mut Rng,
    n_strokes: usize,
    points_per_stroke: RangeInclusive<usize>,
) -> Result<RawDrawing> {
    if n_strokes == 0 || points_per_stroke.is_empty() || *points_per_stroke.start() == 0 {
        return Err(Error::invalid(
            "synthesize_sketch needs n_strokes >= 1 and points >= 1",
        ));
    }
    let mut strokes = Vec::with_capacity(n_strokes);
    for _ in 0..n_strokes {
        let n = rng.random_range(points_per_stroke.clone());
        let mut x: i32 = rng.random_range(0..=255);
        let mut y: i32 = rng.random_range(0..=255);
        let mut stroke = Vec::with_capacity(n);
        for _ in 0..n {
            stroke.push((x as u8, y as u8));
            x = (x + rng.random_range(-20..=20)).clamp(0, 255);
            y = (y + rng.random_range(-20..=20)).clamp(0, 255);
        }
        strokes.push(stroke);
    }
    RawDrawing::new(strokes, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn drawing(strokes: &[&[Point]]) -> RawDrawing {
        RawDrawing::new(strokes.iter().map(|s| s.to_vec()).collect(), "x").unwrap()
    }

    #[test]
    fn parses_quickdraw_records() {
        let line = r#"{"word":"cat","countrycode":"US","drawing":[[[0,10],[0,0]],[[5],[5]]]}"#;
        let d = parse_drawing_line(line, 1).unwrap();
        assert_eq!(d.label(), "cat");
        assert_eq!(d.strokes(), &[vec![(0, 0), (10, 0)], vec![(5, 5)]]);

        let d = parse_drawing_line(r#"{"word":"dot","drawing":[[[3],[4]]]}"#, 1).unwrap();
        assert_eq!(d.num_points(), 1);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let missing = parse_drawing_line(r#"{"word":"cat"}"#, 7).unwrap_err();
        assert!(matches!(missing, Error::Parse { line: 7, .. }), "{missing}");
        let empty = parse_drawing_line(r#"{"word":"cat","drawing":[]}"#, 3).unwrap_err();
        assert!(matches!(empty, Error::EmptyDrawing { line: 3 }));
        for bad in [
            r#"{"word":"cat","drawing":[[[1,2],[1]]]}"#,
            r#"{"word":"cat","drawing":[[[1]]]}"#,
            r#"{"word":"cat","drawing":[[[300],[1]]]}"#,
            r#"{"word":"cat","drawing":[[[],[]]]}"#,
            "not json",
        ] {
            assert!(
                matches!(
                    parse_drawing_line(bad, 2),
                    Err(Error::Parse { line: 2, .. })
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn flatten_flags_stroke_ends() {
        let (a, b, c, d, e) = ((0, 0), (1, 1), (2, 2), (3, 3), (4, 4));
        let seq = flatten(&drawing(&[&[a, b, c], &[d, e]]));
        use Flag::*;
        assert_eq!(seq.flags, [Ongoing, Ongoing, StrokeEnd, Ongoing, StrokeEnd]);
        assert_eq!(seq.stroke_ids, [0, 0, 0, 1, 1]);

        let one = flatten(&drawing(&[&[a]]));
        assert_eq!(one.flags, [StrokeEnd]);
        assert_eq!(one.stroke_ids, [0]);

        let dots = flatten(&drawing(&[&[a], &[b], &[c]]));
        assert_eq!(dots.flags, [StrokeEnd; 3]);
        assert_eq!(dots.stroke_ids, [0, 1, 2]);
    }

    #[test]
    fn pad_and_truncate() {
        let pts: Vec<Point> = (0..3).map(|i| (i, i)).collect();
        let t = to_sketch_tensor(&drawing(&[&pts]), 5, 0).unwrap();
        assert_eq!(t.true_len, 3);
        assert_eq!(&t.coords[3..], &[[-1.0, -1.0]; 2]);
        assert_eq!(&t.flags[3..], &[Flag::Padding; 2]);
        assert_eq!(t.positions().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        t.validate().unwrap();

        let long: Vec<Point> = (0..120).map(|i| (i as u8, 0)).collect();
        let t = to_sketch_tensor(&drawing(&[&long]), 100, 0).unwrap();
        assert_eq!(t.true_len, 100);
        assert!(t.was_truncated());
        assert_eq!(t.coords[99], [99.0, 0.0]);
        // the cut point was not stroke-final, so it keeps its flag
        assert_eq!(t.flags[99], Flag::Ongoing);

        let exact: Vec<Point> = (0..5).map(|i| (i, 9)).collect();
        let t = to_sketch_tensor(&drawing(&[&exact]), 5, 0).unwrap();
        assert_eq!(t.true_len, 5);
        assert!(!t.flags.contains(&Flag::Padding));
        assert!(!t.was_truncated());
    }

    fn labelled(label: usize, len: usize) -> SketchTensor {
        let pts: Vec<Point> = (0..len).map(|i| (i as u8, label as u8)).collect();
        to_sketch_tensor(&drawing(&[&pts]), 100, label).unwrap()
    }

    #[test]
    fn split_counts_are_exact_and_disjoint() {
        let vocab = LabelVocabulary::from_names(["a", "b"]);
        let samples: Vec<SketchTensor> = (0..2)
            .flat_map(|c| (1..=30).map(move |l| labelled(c, l)))
            .collect();
        let counts = SplitCounts {
            train: 20,
            val: 5,
            test: 5,
        };
        let split = split_dataset(samples.clone(), counts, 3, &vocab).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (40, 10, 10)
        );
        for c in 0..2 {
            let mut lens: Vec<usize> = [&split.train, &split.val, &split.test]
                .iter()
                .flat_map(|s| s.iter().filter(|t| t.label == c).map(|t| t.true_len))
                .collect();
            lens.sort();
            assert_eq!(lens, (1..=30).collect::<Vec<_>>());
        }
        let again = split_dataset(samples.clone(), counts, 3, &vocab).unwrap();
        assert_eq!(split, again);

        let single = split_dataset(
            samples.clone(),
            SplitCounts {
                train: 1,
                val: 0,
                test: 0,
            },
            9,
            &vocab,
        )
        .unwrap();
        assert_eq!(single.train.len(), 2);
        assert!(single.val.is_empty() && single.test.is_empty());

        let err = split_dataset(
            samples,
            SplitCounts {
                train: 1000,
                val: 100,
                test: 100,
            },
            0,
            &vocab,
        )
        .unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }

    #[test]
    fn stats_examples() {
        let one = dataset_stats(&[labelled(0, 7)]).unwrap();
        assert_eq!((one.max, one.min, one.mean, one.std), (7, 7, 7.0, 0.0));
        let two = dataset_stats(&[labelled(0, 2), labelled(0, 120)]).unwrap();
        assert_eq!(two.truncated, 1);
        assert_eq!(two.truncated_ratio, 0.5);
        assert_eq!(two.max, 100);
        assert!(dataset_stats(&[]).is_err());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let samples = vec![labelled(0, 3), labelled(1, 120)];
        write_dataset(&path, &samples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["label_idx", "true_len", "coords", "flags", "stroke_ids"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["flags"][3], 2);
        assert_eq!(read_dataset(&path).unwrap(), samples);
    }

    #[test]
    fn vocabulary_is_dense_and_stable() {
        let v = LabelVocabulary::from_names(["dog", "cat", "dog"]);
        assert_eq!(v.len(), 2);
        assert_eq!(v.index_of("cat").unwrap(), 0);
        assert!(v.index_of("cow").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(LabelVocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn synthesized_drawings_are_reproducible() {
        let a = synthesize_sketch(&mut rng_for(0, 0), 2, 3..=5).unwrap();
        let b = synthesize_sketch(&mut rng_for(0, 0), 2, 3..=5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.strokes().len(), 2);
        assert!(a.strokes().iter().all(|s| (3..=5).contains(&s.len())));
        let dot = synthesize_sketch(&mut rng_for(1, 0), 1, 1..=1).unwrap();
        assert_eq!(dot.num_points(), 1);
        assert!(synthesize_sketch(&mut rng_for(1, 0), 0, 1..=1).is_err());
    }

    proptest! {
        #[test]
        fn pipeline_invariants(seed in 0u64..10_000, strokes in 1usize..6, s in 1usize..40) {
            let d = synthesize_sketch(&mut rng_for(seed, 0), strokes, 1..=12).unwrap();
            let seq = flatten(&d);
            prop_assert_eq!(seq.flags.iter().filter(|&&f| f == Flag::StrokeEnd).count(), strokes);
            let t = pad_truncate(&seq, s, 0).unwrap();
            t.validate().unwrap();
            prop_assert_eq!(t.flags.iter().filter(|&&f| f == Flag::Padding).count(), s - t.true_len);
            for i in 0..t.true_len {
                let (x, y) = seq.points[i];
                prop_assert_eq!(t.coords[i], [f32::from(x), f32::from(y)]);
            }
            // round trip through the text format
            let back = parse_drawing_line(&drawing_to_line(&d), 1).unwrap();
            prop_assert_eq!(&back.strokes, &d.strokes);
            // re-padding an exact-length sequence is the identity
            let exact = KeyPointSequence {
                points: seq.points[..t.true_len].to_vec(),
                flags: t.flags[..t.true_len].to_vec(),
                stroke_ids: seq.stroke_ids[..t.true_len].to_vec(),
            };
            let again = pad_truncate(&exact, t.true_len, 0).unwrap();
            let again2 = pad_truncate(&flatten_like(&again), t.true_len, 0).unwrap();
            prop_assert_eq!(again, again2);
        }
    }

    fn flatten_like(t: &SketchTensor) -> KeyPointSequence {
        KeyPointSequence {
            points: t.coords[..t.true_len]
                .iter()
                .map(|c| (c[0] as u8, c[1] as u8))
                .collect(),
            flags: t.flags[..t.true_len].to_vec(),
            stroke_ids: t.stroke_ids[..t.true_len]
                .iter()
                .map(|&s| s as usize)
                .collect(),
        }
    }
}
