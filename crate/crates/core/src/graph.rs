//! Sketch graphs: binary `S x S` attention masks built from stroke structure.
//!
//! Every builder connects each node to itself and leaves padding nodes
//! isolated (diagonal only). Builders are pure functions of the sketch; the
//! random builder takes its stream explicitly.

use std::fmt;
use std::hash::{Hash, Hasher};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sketch_data::SketchTensor;
use crate::tensor::{rng_for, Mask, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GraphKind {
    KHop(usize),
    Global,
    Full,
    IntraFull,
    Random(f64),
    EuclideanKnn(usize),
    Union,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    size: usize,
    data: Vec<bool>,
    kind: GraphKind,
    true_len: usize,
}

impl AdjacencyMatrix {
    fn with_diagonal(size: usize, kind: GraphKind, true_len: usize) -> Self {
        let mut data = vec![false; size * size];
        for i in 0..size {
            data[i * size + i] = true;
        }
        AdjacencyMatrix {
            size,
            data,
            kind,
            true_len,
        }
    }

    fn link(&mut self, i: usize, j: usize) {
        self.data[i * self.size + j] = true;
        self.data[j * self.size + i] = true;
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> &GraphKind {
        &self.kind
    }

    pub fn true_len(&self) -> usize {
        self.true_len
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.size + j]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Number of off-diagonal ones.
    pub fn edge_entries(&self) -> usize {
        (0..self.size)
            .map(|i| (0..self.size).filter(|&j| j != i && self.get(i, j)).count())
            .sum()
    }

    /// Same matrix with the diagonal cleared.
    pub fn without_self_loops(mut self) -> Self {
        for i in 0..self.size {
            self.data[i * self.size + i] = false;
        }
        self
    }

    /// Elementwise `<=`.
    pub fn is_subset_of(&self, other: &AdjacencyMatrix) -> bool {
        self.size == other.size && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Rows of `0`/`1` characters, one row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.size * (self.size + 1));
        for i in 0..self.size {
            for j in 0..self.size {
                s.push(if self.get(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

fn same_stroke(sketch: &SketchTensor, i: usize, j: usize) -> bool {
    sketch.stroke_ids[i] == sketch.stroke_ids[j]
}

/// Points within `k` temporal steps of each other on the same stroke.
pub fn build_khop(sketch: &SketchTensor, k: usize) -> Result<AdjacencyMatrix> {
    if k == 0 {
        return Err(Error::invalid("K-hop graph needs K >= 1"));
    }
    let n = sketch.true_len;
    let mut a = AdjacencyMatrix::with_diagonal(sketch.seq_len(), GraphKind::KHop(k), n);
    for i in 0..n {
        for j in i + 1..n.min(i + k + 1) {
            if same_stroke(sketch, i, j) {
                a.link(i, j);
            }
        }
    }
    Ok(a)
}

/// Temporally consecutive points that belong to different strokes.
pub fn build_global(sketch: &SketchTensor) -> AdjacencyMatrix {
    let n = sketch.true_len;
    let mut a = AdjacencyMatrix::with_diagonal(sketch.seq_len(), GraphKind::Global, n);
    for i in 1..n {
        if !same_stroke(sketch, i - 1, i) {
            a.link(i - 1, i);
        }
    }
    a
}

/// All real points connected.
pub fn build_full(sketch: &SketchTensor) -> AdjacencyMatrix {
    let n = sketch.true_len;
    let mut a = AdjacencyMatrix::with_diagonal(sketch.seq_len(), GraphKind::Full, n);
    for i in 0..n {
        for j in i + 1..n {
            a.link(i, j);
        }
    }
    a
}

/// All real points of the same stroke connected.
pub fn build_intra_full(sketch: &SketchTensor) -> AdjacencyMatrix {
    let n = sketch.true_len;
    let mut a = AdjacencyMatrix::with_diagonal(sketch.seq_len(), GraphKind::IntraFull, n);
    for i in 0..n {
        for j in i + 1..n {
            if same_stroke(sketch, i, j) {
                a.link(i, j);
            }
        }
    }
    a
}

/// Each unordered pair of real points linked with probability `density`.
pub fn build_random(sketch: &SketchTensor, density: f64, rng: &mut Rng) -> Result<AdjacencyMatrix> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!(
            "random graph density {density} not in (0, 1]"
        )));
    }
    let n = sketch.true_len;
    let mut a = AdjacencyMatrix::with_diagonal(sketch.seq_len(), GraphKind::Random(density), n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                a.link(i, j);
            }
        }
    }
    Ok(a)
}

/// Each real point linked to its `k` nearest real points by Euclidean
/// distance (ties to the lower index), symmetrized by OR.
pub fn build_euclidean_knn(sketch: &SketchTensor, k: usize) -> Result<AdjacencyMatrix> {
    if k == 0 {
        return Err(Error::invalid("k-NN graph needs k >= 1"));
    }
    let n = sketch.true_len;
    let mut a = AdjacencyMatrix::with_diagonal(sketch.seq_len(), GraphKind::EuclideanKnn(k), n);
    let dist2 = |i: usize, j: usize| {
        let (p, q) = (sketch.coords[i], sketch.coords[j]);
        let (dx, dy) = (f64::from(p[0] - q[0]), f64::from(p[1] - q[1]));
        dx * dx + dy * dy
    };
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&x, &y| dist2(i, x).total_cmp(&dist2(i, y)).then(x.cmp(&y)));
        for &j in order.iter().take(k) {
            a.link(i, j);
        }
    }
    Ok(a)
}

/// Elementwise OR of equally sized matrices.
pub fn union(adjs: &[&AdjacencyMatrix]) -> Result<AdjacencyMatrix> {
    let first = adjs
        .first()
        .ok_or_else(|| Error::invalid("union of zero graphs"))?;
    let mut out = AdjacencyMatrix {
        size: first.size,
        data: first.data.clone(),
        kind: GraphKind::Union,
        true_len: first.true_len,
    };
    for a in &adjs[1..] {
        if a.size != out.size {
            return Err(Error::shape(
                "union",
                &[out.size, out.size],
                &[a.size, a.size],
            ));
        }
        for (o, &v) in out.data.iter_mut().zip(&a.data) {
            *o |= v;
        }
    }
    Ok(out)
}

/// Stacks per-sample matrices into a batched attention mask.
pub fn stack_masks(adjs: &[AdjacencyMatrix]) -> Result<Mask> {
    let size = adjs.first().map_or(0, |a| a.size);
    if adjs.iter().any(|a| a.size != size) {
        return Err(Error::invalid("graphs in a batch must share S"));
    }
    let data = adjs.iter().flat_map(|a| a.data.iter().copied()).collect();
    Mask::new(adjs.len(), size, data)
}

/// One graph of a model configuration, e.g. `khop:2` or `union(khop:1,global)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GraphSpec {
    KHop(usize),
    Global,
    Full,
    IntraFull,
    Random(f64),
    Knn(usize),
    Union(Vec<GraphSpec>),
}

impl GraphSpec {
    /// Builds the graph for one sketch. `seed` only affects random graphs,
    /// whose stream is further keyed by the sketch content so a sample sees
    /// the same graph in every epoch.
    pub fn build(
        &self,
        sketch: &SketchTensor,
        self_loops: bool,
        seed: u64,
    ) -> Result<AdjacencyMatrix> {
        let a = self.build_inner(sketch, seed)?;
        Ok(if self_loops {
            a
        } else {
            a.without_self_loops()
        })
    }

    fn build_inner(&self, sketch: &SketchTensor, seed: u64) -> Result<AdjacencyMatrix> {
        Ok(match self {
            GraphSpec::KHop(k) => build_khop(sketch, *k)?,
            GraphSpec::Global => build_global(sketch),
            GraphSpec::Full => build_full(sketch),
            GraphSpec::IntraFull => build_intra_full(sketch),
            GraphSpec::Random(p) => {
                build_random(sketch, *p, &mut rng_for(seed, sketch_key(sketch)))?
            }
            GraphSpec::Knn(k) => build_euclidean_knn(sketch, *k)?,
            GraphSpec::Union(parts) => {
                let built = parts
                    .iter()
                    .map(|p| p.build_inner(sketch, seed))
                    .collect::<Result<Vec<_>>>()?;
                union(&built.iter().collect::<Vec<_>>())?
            }
        })
    }

    /// Parses a comma-separated list of specs; commas inside `union(...)`
    /// belong to the union.
    pub fn parse_list(s: &str) -> Result<Vec<GraphSpec>> {
        split_top_level(s)?.into_iter().map(|t| t.parse()).collect()
    }
}

fn sketch_key(sketch: &SketchTensor) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for c in &sketch.coords {
        c[0].to_bits().hash(&mut h);
        c[1].to_bits().hash(&mut h);
    }
    sketch.stroke_ids.hash(&mut h);
    h.finish()
}

fn split_top_level(s: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::invalid(format!("unbalanced `)` in `{s}`")));
                }
            }
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::invalid(format!("unbalanced `(` in `{s}`")));
    }
    out.push(s[start..].trim());
    if out.iter().any(|t| t.is_empty()) {
        return Err(Error::invalid(format!("empty graph spec in `{s}`")));
    }
    Ok(out)
}

impl std::str::FromStr for GraphSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("unknown graph spec `{s}`"));
        if let Some(inner) = s.strip_prefix("union(").and_then(|r| r.strip_suffix(')')) {
            return Ok(GraphSpec::Union(GraphSpec::parse_list(inner)?));
        }
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s, None),
        };
        let int = |a: Option<&str>| -> Result<usize> {
            let v: usize = a.ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if v == 0 {
                return Err(Error::invalid(format!("`{s}`: parameter must be >= 1")));
            }
            Ok(v)
        };
        match (name, arg) {
            ("khop", a) => Ok(GraphSpec::KHop(int(a)?)),
            ("knn", a) => Ok(GraphSpec::Knn(int(a)?)),
            ("random", Some(a)) => {
                let p: f64 = a.parse().map_err(|_| bad())?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::invalid(format!("`{s}`: density must be in (0, 1]")));
                }
                Ok(GraphSpec::Random(p))
            }
            ("global", None) => Ok(GraphSpec::Global),
            ("full", None) => Ok(GraphSpec::Full),
            ("intra_full", None) => Ok(GraphSpec::IntraFull),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for GraphSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphSpec::KHop(k) => write!(f, "khop:{k}"),
            GraphSpec::Global => f.write_str("global"),
            GraphSpec::Full => f.write_str("full"),
            GraphSpec::IntraFull => f.write_str("intra_full"),
            GraphSpec::Random(p) => write!(f, "random:{p}"),
            GraphSpec::Knn(k) => write!(f, "knn:{k}"),
            GraphSpec::Union(parts) => {
                f.write_str("union(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{p}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Formats a list of specs the way [`GraphSpec::parse_list`] reads them.
pub fn format_list(specs: &[GraphSpec]) -> String {
    specs
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch_data::{pad_truncate, Flag, KeyPointSequence};

    /// Sketch whose strokes have the given lengths, padded to `s`.
    fn sketch(strokes: &[usize], s: usize) -> SketchTensor {
        let mut seq = KeyPointSequence {
            points: vec![],
            flags: vec![],
            stroke_ids: vec![],
        };
        for (sid, &n) in strokes.iter().enumerate() {
            for i in 0..n {
                seq.points
                    .push(((seq.points.len() * 3) as u8, (sid * 7) as u8));
                seq.flags.push(if i + 1 == n {
                    Flag::StrokeEnd
                } else {
                    Flag::Ongoing
                });
                seq.stroke_ids.push(sid);
            }
        }
        pad_truncate(&seq, s, 0).unwrap()
    }

    fn ones(a: &AdjacencyMatrix) -> Vec<(usize, usize)> {
        let n = a.size();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && a.get(i, j))
            .collect()
    }

    #[test]
    fn khop_examples() {
        let chain = build_khop(&sketch(&[4], 4), 1).unwrap();
        assert_eq!(
            ones(&chain),
            vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]
        );

        let two = sketch(&[3, 2], 5);
        assert!(!build_khop(&two, 1).unwrap().get(2, 3));
        let k2 = build_khop(&two, 2).unwrap();
        assert!(k2.get(0, 2));
        assert!(!k2.get(0, 3));
        assert!(build_khop(&two, 0).is_err());
    }

    #[test]
    fn global_examples() {
        let g = build_global(&sketch(&[3, 2], 5));
        assert_eq!(ones(&g), vec![(2, 3), (3, 2)]);
        assert_eq!(ones(&build_global(&sketch(&[6], 8))), vec![]);
        let dots = build_global(&sketch(&[1, 1, 1], 3));
        assert_eq!(ones(&dots), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        for i in 0..3 {
            assert!(dots.get(i, i));
        }
    }

    #[test]
    fn full_and_intra_full_examples() {
        let f = build_full(&sketch(&[3], 4));
        for i in 0..3 {
            for j in 0..3 {
                assert!(f.get(i, j));
            }
            assert!(!f.get(i, 3) && !f.get(3, i));
        }
        assert!(f.get(3, 3));

        let intra = build_intra_full(&sketch(&[2, 1], 3));
        assert_eq!(ones(&intra), vec![(0, 1), (1, 0)]);

        let single = build_full(&sketch(&[1], 3));
        assert_eq!(ones(&single), vec![]);
        assert!((0..3).all(|i| single.get(i, i)));
    }

    #[test]
    fn random_graph_density_and_determinism() {
        let s = sketch(&[10, 12, 25], 50);
        assert_eq!(
            build_random(&s, 1.0, &mut rng_for(1, 1)).unwrap().data(),
            build_full(&s).data()
        );
        // 47 real nodes give 1081 unordered pairs
        let a = build_random(&s, 0.1, &mut rng_for(1, 1)).unwrap();
        let frac = a.edge_entries() as f64 / 2.0 / 1081.0;
        assert!((frac - 0.1).abs() < 0.03, "{frac}");
        assert!(a.is_symmetric());
        assert_eq!(a, build_random(&s, 0.1, &mut rng_for(1, 1)).unwrap());
        assert!(build_random(&s, 0.0, &mut rng_for(1, 1)).is_err());
    }

    #[test]
    fn knn_examples() {
        let mut s = sketch(&[3], 3);
        s.coords = vec![[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]];
        let a = build_euclidean_knn(&s, 1).unwrap();
        assert_eq!(ones(&a), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);

        let s = sketch(&[4, 3], 9);
        assert_eq!(
            build_euclidean_knn(&s, 6).unwrap().data(),
            build_full(&s).data()
        );

        let mut dup = sketch(&[3], 3);
        dup.coords = vec![[5.0, 5.0], [5.0, 5.0], [5.0, 5.0]];
        let a = build_euclidean_knn(&dup, 1).unwrap();
        // 0 -> 1, 1 -> 0, 2 -> 0
        assert_eq!(ones(&a), vec![(0, 1), (0, 2), (1, 0), (2, 0)]);
    }

    #[test]
    fn union_examples() {
        let s = sketch(&[3, 2], 6);
        let (k1, k2, g) = (
            build_khop(&s, 1).unwrap(),
            build_khop(&s, 2).unwrap(),
            build_global(&s),
        );
        assert_eq!(union(&[&k1, &k2]).unwrap().data(), k2.data());
        assert_eq!(union(&[&k1, &k1]).unwrap().data(), k1.data());
        let u = union(&[&k1, &k2, &g]).unwrap();
        let want = [
            (0, 1),
            (0, 2),
            (1, 0),
            (1, 2),
            (2, 0),
            (2, 1),
            (2, 3),
            (3, 2),
            (3, 4),
            (4, 3),
        ];
        assert_eq!(ones(&u), want);
        assert_eq!(u.kind(), &GraphKind::Union);
        let other = build_full(&sketch(&[3], 4));
        assert!(union(&[&k1, &other]).is_err());
    }

    #[test]
    fn spec_parsing_round_trips() {
        let specs = GraphSpec::parse_list(
            "khop:1, khop:2,global,union(khop:1,global),random:0.2,knn:4,full,intra_full",
        )
        .unwrap();
        assert_eq!(specs.len(), 8);
        assert_eq!(
            specs[3],
            GraphSpec::Union(vec![GraphSpec::KHop(1), GraphSpec::Global])
        );
        assert_eq!(GraphSpec::parse_list(&format_list(&specs)).unwrap(), specs);
        for bad in [
            "khop",
            "khop:0",
            "random:1.5",
            "union(khop:1",
            "blob",
            "khop:1,,global",
            "global:3",
        ] {
            assert!(GraphSpec::parse_list(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn text_export_and_self_loop_flag() {
        let s = sketch(&[2], 3);
        let a = GraphSpec::KHop(1).build(&s, true, 0).unwrap();
        assert_eq!(a.to_text(), "110\n110\n001\n");
        let b = GraphSpec::KHop(1).build(&s, false, 0).unwrap();
        assert_eq!(b.to_text(), "010\n100\n000\n");
    }
}
