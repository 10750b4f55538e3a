//! Embedding dumps, perturbed distance and anchor-ordering diagnostics.
//!
//! Dump file format (UTF-8, tab separated):
//!
//! ```text
//! # opr-embeddings 1
//! # d 2
//! # count 3
//! # anchors 0=real 1=sbi 2=cbi 3=deepfake
//! f001	real	0.12	-0.40
//! f001	sbi	0.33	-0.21
//! f002	deepfake	1.05	0.77
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::AnchorKind;

pub const DUMP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub item_id: String,
    pub kind: AnchorKind,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub d: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingDump {
    pub fn new(d: usize, rows: Vec<EmbeddingRow>) -> Result<Self> {
        for r in &rows {
            if r.vector.len() != d {
                return Err(Error::Shape(format!("`{}` has {} dims, dump has {d}", r.item_id, r.vector.len())));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Metric(format!("non-finite embedding for `{}`", r.item_id)));
            }
        }
        Ok(Self { d, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.vector.clone()).collect()
    }

    /// Population standard deviation of each dimension.
    pub fn dim_std(&self) -> Vec<f64> {
        dim_std(&self.vectors())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# opr-embeddings {DUMP_VERSION}\n# d {}\n# count {}\n# anchors",
            self.d,
            self.rows.len()
        );
        for k in AnchorKind::ALL {
            s.push_str(&format!(" {}={}", k.index(), k.name()));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.item_id);
            s.push('\t');
            s.push_str(r.kind.name());
            for v in &r.vector {
                s.push_str(&format!("\t{v:?}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Corrupt("truncated dump header".into()))?;
            line.strip_prefix("# ")
                .and_then(|l| l.strip_prefix(key))
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::Corrupt(format!("expected `# {key}`, got `{line}`")))
        };
        let version: u32 = header("opr-embeddings")?
            .parse()
            .map_err(|_| Error::Corrupt("bad dump version".into()))?;
        if version != DUMP_VERSION {
            return Err(Error::Version {
                expected: DUMP_VERSION,
                found: version,
            });
        }
        let d: usize = header("d")?.parse().map_err(|_| Error::Corrupt("bad d".into()))?;
        let count: usize = header("count")?.parse().map_err(|_| Error::Corrupt("bad count".into()))?;
        header("anchors")?;
        let mut rows = Vec::with_capacity(count);
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split('\t');
            let item_id = parts.next().unwrap_or_default().to_string();
            let kind = parts
                .next()
                .and_then(AnchorKind::parse)
                .ok_or_else(|| Error::Corrupt(format!("row {i}: bad anchor kind")))?;
            let vector = parts
                .map(|p| p.parse::<f64>().map_err(|_| Error::Corrupt(format!("row {i}: bad value `{p}`"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(EmbeddingRow { item_id, kind, vector });
        }
        if rows.len() != count {
            return Err(Error::Corrupt(format!("header says {count} rows, found {}", rows.len())));
        }
        Self::new(d, rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

pub fn dim_std(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let d = vectors.first().map_or(0, Vec::len);
    (0..d)
        .map(|k| {
            let mean = vectors.iter().map(|v| v[k]).sum::<f64>() / n;
            (vectors.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Which PD expression to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdForm {
    /// Mean standardized Euclidean distance `||(F_i - F) / std||`.
    #[default]
    Difference,
    /// `sqrt(sum_k (F_i,k^2 + F_k^2) / std_k^2)`, kept for comparison. Not a
    /// distance: it is nonzero when `F_i == F`.
    Printed,
}

pub fn perturbed_distance(original: &[f64], perturbed: &[Vec<f64>], dim_std: &[f64], form: PdForm) -> Result<f64> {
    if perturbed.is_empty() {
        return Err(Error::Metric("no perturbed embeddings".into()));
    }
    if let Some(k) = dim_std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Metric(format!("zero standard deviation in dimension {k}")));
    }
    let d = original.len();
    if dim_std.len() != d {
        return Err(Error::Shape(format!("std has {} dims, embedding {d}", dim_std.len())));
    }
    let mut total = 0.0;
    for p in perturbed {
        if p.len() != d {
            return Err(Error::Shape(format!("perturbed embedding has {} dims, expected {d}", p.len())));
        }
        let sq: f64 = (0..d)
            .map(|k| match form {
                PdForm::Difference => ((p[k] - original[k]) / dim_std[k]).powi(2),
                PdForm::Printed => (p[k] * p[k] + original[k] * original[k]) / (dim_std[k] * dim_std[k]),
            })
            .sum();
        total += sq.sqrt();
    }
    Ok(total / perturbed.len() as f64)
}

/// Per-item PD using the dump's own per-dimension std.
pub fn pd_per_item(dump: &EmbeddingDump, perturbed: &[Vec<Vec<f64>>], form: PdForm) -> Result<Vec<f64>> {
    if dump.is_empty() {
        return Err(Error::Metric("empty embedding dump".into()));
    }
    if perturbed.len() != dump.len() {
        return Err(Error::Shape(format!(
            "{} perturbed sets for {} items",
            perturbed.len(),
            dump.len()
        )));
    }
    let n = perturbed[0].len();
    if perturbed.iter().any(|p| p.len() != n) {
        return Err(Error::Shape("items have different repeat counts".into()));
    }
    let std = dump.dim_std();
    dump.rows
        .iter()
        .zip(perturbed)
        .map(|(r, p)| perturbed_distance(&r.vector, p, &std, form))
        .collect()
}

pub fn mpd(dump: &EmbeddingDump, perturbed: &[Vec<Vec<f64>>], form: PdForm) -> Result<f64> {
    let pds = pd_per_item(dump, perturbed, form)?;
    Ok(pds.iter().sum::<f64>() / pds.len() as f64)
}

/// Rank-based mapping used by [`ordering_statistic`].
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j - 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman correlation between anchor order and the projection of each
/// embedding onto the axis from the least-fake to the most-fake centroid.
pub fn ordering_statistic(dump: &EmbeddingDump) -> Result<f64> {
    ordering_statistic_with(dump, |k| k.index() as f64)
}

pub fn ordering_statistic_with(dump: &EmbeddingDump, rank: impl Fn(AnchorKind) -> f64) -> Result<f64> {
    let axis = centroid_axis(dump, &rank)?;
    ordering_along(dump, &axis, rank)
}

/// Axis from the centroid of the lowest-ranked anchor kind present to that
/// of the highest-ranked one.
pub fn centroid_axis(dump: &EmbeddingDump, rank: impl Fn(AnchorKind) -> f64) -> Result<Vec<f64>> {
    let mut kinds: Vec<AnchorKind> = dump.rows.iter().map(|r| r.kind).collect();
    kinds.sort_by(|a, b| rank(*a).total_cmp(&rank(*b)));
    kinds.dedup();
    if kinds.len() < 2 {
        return Err(Error::Metric("ordering needs at least two anchor kinds".into()));
    }
    let centroid = |k: AnchorKind| {
        let rows: Vec<&EmbeddingRow> = dump.rows.iter().filter(|r| r.kind == k).collect();
        (0..dump.d)
            .map(|j| rows.iter().map(|r| r.vector[j]).sum::<f64>() / rows.len() as f64)
            .collect::<Vec<f64>>()
    };
    let lo = centroid(kinds[0]);
    let hi = centroid(*kinds.last().unwrap());
    let axis: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
    if axis.iter().all(|&v| v == 0.0) {
        return Err(Error::Metric("anchor centroids coincide".into()));
    }
    Ok(axis)
}

/// Spearman correlation between anchor rank and the projection on a fixed axis.
pub fn ordering_along(dump: &EmbeddingDump, axis: &[f64], rank: impl Fn(AnchorKind) -> f64) -> Result<f64> {
    if axis.len() != dump.d {
        return Err(Error::Shape(format!("axis has {} dims, dump {}", axis.len(), dump.d)));
    }
    let proj: Vec<f64> = dump
        .rows
        .iter()
        .map(|r| r.vector.iter().zip(axis).map(|(v, a)| v * a).sum())
        .collect();
    let ranks: Vec<f64> = dump.rows.iter().map(|r| rank(r.kind)).collect();
    spearman(&ranks, &proj).ok_or_else(|| Error::Metric("constant projection or single anchor kind".into()))
}

const ANCHOR_COLORS: [[u8; 3]; 4] = [[40, 160, 60], [60, 110, 220], [240, 160, 30], [210, 40, 40]];

fn plot_frame(points: &[[f64; 2]], size: u32) -> (RgbImage, impl Fn([f64; 2]) -> (i64, i64)) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let sx = (x1 - x0).max(1e-12);
    let sy = (y1 - y0).max(1e-12);
    let margin = 12.0;
    let span = f64::from(size) - 2.0 * margin;
    let map = move |p: [f64; 2]| {
        (
            (margin + (p[0] - x0) / sx * span).round() as i64,
            (margin + (1.0 - (p[1] - y0) / sy) * span).round() as i64,
        )
    };
    (RgbImage::from_pixel(size, size, Rgb([255, 255, 255])), map)
}

fn dot(img: &mut RgbImage, cx: i64, cy: i64, r: i64, color: [u8; 3]) {
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r && x >= 0 && y >= 0 {
                if let Some(px) = img.get_pixel_mut_checked(x as u32, y as u32) {
                    *px = Rgb(color);
                }
            }
        }
    }
}

fn first_two(dump: &EmbeddingDump) -> Vec<[f64; 2]> {
    dump.rows
        .iter()
        .map(|r| [r.vector[0], r.vector.get(1).copied().unwrap_or(0.0)])
        .collect()
}

/// Scatter of the first two embedding dimensions coloured by anchor kind.
pub fn scatter_plot(dump: &EmbeddingDump, size: u32) -> RgbImage {
    let pts = first_two(dump);
    let (mut img, map) = plot_frame(&pts, size);
    for (p, r) in pts.iter().zip(&dump.rows) {
        let (x, y) = map(*p);
        dot(&mut img, x, y, 2, ANCHOR_COLORS[r.kind.index()]);
    }
    img
}

/// Points coloured by a per-item value on a blue-to-red ramp.
pub fn heatmap_plot(dump: &EmbeddingDump, values: &[f64], size: u32) -> RgbImage {
    let pts = first_two(dump);
    let (mut img, map) = plot_frame(&pts, size);
    let lo = values.iter().copied().fold(f64::MAX, f64::min);
    let hi = values.iter().copied().fold(f64::MIN, f64::max);
    for (p, &v) in pts.iter().zip(values) {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let color = [(255.0 * t) as u8, 40, (255.0 * (1.0 - t)) as u8];
        let (x, y) = map(*p);
        dot(&mut img, x, y, 2, color);
    }
    img
}

/// `item_id,anchor,v0..,pd` rows backing the plots.
pub fn write_points_csv(path: &Path, dump: &EmbeddingDump, pd: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let dims: Vec<String> = (0..dump.d).map(|k| format!("v{k}")).collect();
    writeln!(f, "item_id,anchor,{},pd", dims.join(","))?;
    for (r, v) in dump.rows.iter().zip(pd) {
        let vals: Vec<String> = r.vector.iter().map(|x| x.to_string()).collect();
        writeln!(f, "{},{},{},{v}", r.item_id, r.kind.name(), vals.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, kind: AnchorKind, v: &[f64]) -> EmbeddingRow {
        EmbeddingRow {
            item_id: id.into(),
            kind,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn dump_round_trip() {
        let d = EmbeddingDump::new(
            2,
            vec![row("a", AnchorKind::Real, &[0.1, -2.5e-7]), row("b", AnchorKind::Cbi, &[3.0, 1.0 / 3.0])],
        )
        .unwrap();
        let back = EmbeddingDump::parse(&d.to_text()).unwrap();
        assert_eq!(back, d);
        let bumped = d.to_text().replacen("opr-embeddings 1", "opr-embeddings 2", 1);
        assert!(matches!(EmbeddingDump::parse(&bumped), Err(Error::Version { .. })));
        assert!(EmbeddingDump::new(2, vec![row("x", AnchorKind::Real, &[1.0])]).is_err());
    }

    #[test]
    fn pd_basics() {
        let o = [1.0, 2.0];
        assert_eq!(perturbed_distance(&o, &vec![o.to_vec(); 3], &[1.0, 1.0], PdForm::Difference).unwrap(), 0.0);
        let p = vec![vec![1.0 + 0.6 * 2.0, 2.0 + 0.8 * 0.5]];
        assert!((perturbed_distance(&o, &p, &[2.0, 0.5], PdForm::Difference).unwrap() - 1.0).abs() < 1e-12);
        assert!(perturbed_distance(&o, &p, &[0.0, 1.0], PdForm::Difference).is_err());
        assert!(perturbed_distance(&o, &[o.to_vec()], &[1.0, 1.0], PdForm::Printed).unwrap() > 0.0);
    }

    #[test]
    fn ordering_cases() {
        let line = |order: [AnchorKind; 4]| {
            let mut rows = Vec::new();
            for (pos, k) in order.iter().enumerate() {
                for j in 0..5 {
                    rows.push(row(&format!("{k}{j}"), *k, &[pos as f64, 2.0 * pos as f64]));
                }
            }
            EmbeddingDump::new(2, rows).unwrap()
        };
        use AnchorKind::*;
        assert!((ordering_statistic(&line([Real, Sbi, Cbi, Deepfake])).unwrap() - 1.0).abs() < 1e-12);
        // The centroid axis follows the data, so a mirrored layout still reads as ordered.
        let forward = line([Real, Sbi, Cbi, Deepfake]);
        let reversed = line([Deepfake, Cbi, Sbi, Real]);
        assert!((ordering_statistic(&reversed).unwrap() - 1.0).abs() < 1e-12);
        let axis = centroid_axis(&forward, |k| k.index() as f64).unwrap();
        assert!((ordering_along(&reversed, &axis, |k| k.index() as f64).unwrap() + 1.0).abs() < 1e-12);
        let swapped = line([Real, Cbi, Sbi, Deepfake]);
        let v = ordering_statistic(&swapped).unwrap();
        assert!(v > 0.0 && v < 1.0);
        let same = EmbeddingDump::new(2, vec![row("a", Real, &[1.0, 1.0]), row("b", Deepfake, &[1.0, 1.0])]).unwrap();
        assert!(ordering_statistic(&same).is_err());
    }
}
