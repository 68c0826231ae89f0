use std::fmt;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use super::BenchError;

/// How successive grid values are produced from the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Add(u64),
    Mul(u64),
    /// Only the start value is emitted.
    Fixed,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Add(k) => write!(f, "+{k}"),
            Step::Mul(k) => write!(f, "x{k}"),
            Step::Fixed => f.write_str("0"),
        }
    }
}

impl std::str::FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "0" || s == "x0" || s == "*0" {
            return Ok(Step::Fixed);
        }
        let kind = s.chars().next().ok_or_else(|| "empty step".to_string())?;
        let rest = &s[kind.len_utf8()..];
        let k = parse_count(rest.trim()).ok_or_else(|| format!("bad step `{s}`"))?;
        match kind {
            '+' => Ok(Step::Add(k)),
            'x' | '*' | '×' => Ok(Step::Mul(k)),
            _ => Err(format!("step `{s}` must start with `+` or `x`")),
        }
    }
}

impl Serialize for Step {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Step {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

fn parse_count(s: &str) -> Option<u64> {
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    let f: f64 = s.parse().ok()?;
    (f >= 0.0 && f.fract() == 0.0 && f < u64::MAX as f64).then_some(f as u64)
}

/// Accepts `1024`, `2.09e7` or `"2.09e7"`; the value must be a whole number.
fn de_count<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Float(f64),
        Str(String),
    }
    let bad = || de::Error::custom("expected a non-negative whole number");
    match Raw::deserialize(d)? {
        Raw::Int(v) => Ok(v),
        Raw::Float(f) => parse_count(&f.to_string()).ok_or_else(bad),
        Raw::Str(s) => parse_count(&s).ok_or_else(bad),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    #[serde(default)]
    pub name: String,
    #[serde(deserialize_with = "de_count")]
    pub start: u64,
    pub step: Step,
    /// Inclusive upper bound.
    #[serde(deserialize_with = "de_count")]
    pub end: u64,
}

impl GridAxis {
    pub fn new(name: &str, start: u64, step: Step, end: u64) -> Self {
        GridAxis {
            name: name.to_string(),
            start,
            step,
            end,
        }
    }

    pub fn values(&self) -> Result<Vec<u64>, BenchError> {
        let err = |reason: &str| BenchError::Grid {
            axis: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.start > self.end {
            return Err(err("start exceeds end"));
        }
        let mut out = vec![self.start];
        match self.step {
            Step::Fixed => {}
            Step::Add(0) => return Err(err("additive step must be positive")),
            Step::Mul(k) if k < 2 => return Err(err("multiplicative step must exceed 1")),
            Step::Add(k) => {
                let mut v = self.start;
                while let Some(next) = v.checked_add(k).filter(|&n| n <= self.end) {
                    out.push(next);
                    v = next;
                }
            }
            Step::Mul(k) => {
                if self.start == 0 {
                    return Err(err("multiplicative axis cannot start at 0"));
                }
                let mut v = self.start;
                while let Some(next) = v.checked_mul(k).filter(|&n| n <= self.end) {
                    out.push(next);
                    v = next;
                }
            }
        }
        Ok(out)
    }
}

/// A set of named axes whose Cartesian product forms the sampling grid.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

impl GridSpec {
    pub fn new(axes: Vec<GridAxis>) -> Self {
        GridSpec { axes }
    }

    pub fn axis(&self, name: &str) -> Option<&GridAxis> {
        self.axes.iter().find(|a| a.name == name)
    }

    pub fn axis_mut(&mut self, name: &str) -> Option<&mut GridAxis> {
        self.axes.iter_mut().find(|a| a.name == name)
    }

    /// Cartesian product of axis values; the first axis varies slowest.
    pub fn points(&self) -> Result<Vec<Vec<u64>>, BenchError> {
        let mut out: Vec<Vec<u64>> = vec![Vec::new()];
        for axis in &self.axes {
            let values = axis.values()?;
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        Ok(out)
    }

    pub fn require(&self, names: &[&str]) -> Result<Vec<usize>, BenchError> {
        names
            .iter()
            .map(|&n| {
                self.axes.iter().position(|a| a.name == n).ok_or_else(|| BenchError::Grid {
                    axis: n.to_string(),
                    reason: "axis missing from grid".into(),
                })
            })
            .collect()
    }
}

// Serialized as a table keyed by axis name, e.g. `mp = { start = 1, step = "x2", end = 16 }`.
impl Serialize for GridSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        #[derive(Serialize)]
        struct Entry<'a> {
            start: u64,
            step: &'a Step,
            end: u64,
        }
        let mut map = s.serialize_map(Some(self.axes.len()))?;
        for a in &self.axes {
            map.serialize_entry(
                &a.name,
                &Entry {
                    start: a.start,
                    step: &a.step,
                    end: a.end,
                },
            )?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for GridSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = indexmap_like::deserialize(d)?;
        Ok(GridSpec {
            axes: map
                .into_iter()
                .map(|(name, mut axis)| {
                    axis.name = name;
                    axis
                })
                .collect(),
        })
    }
}

mod indexmap_like {
    use super::GridAxis;
    use serde::de::{Deserializer, MapAccess, Visitor};
    use std::fmt;

    /// Deserializes a map while keeping the source order of its keys.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(String, GridAxis)>, D::Error> {
        struct OrderedVisitor;
        impl<'de> Visitor<'de> for OrderedVisitor {
            type Value = Vec<(String, GridAxis)>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a table of grid axes")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, GridAxis>()? {
                    out.push((k, v));
                }
                Ok(out)
            }
        }
        d.deserialize_map(OrderedVisitor)
    }
}

/// One sampling point of the compute-kernel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComputePoint {
    pub mp: u64,
    pub b: u64,
    pub h: u64,
    pub l: u64,
    pub d: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommPoint {
    pub entries: u64,
    pub processes: u64,
}

pub fn gen_compute_grid(spec: &GridSpec) -> Result<Vec<ComputePoint>, BenchError> {
    let idx = spec.require(&["mp", "b", "h", "l", "d"])?;
    Ok(spec
        .points()?
        .into_iter()
        .map(|p| ComputePoint {
            mp: p[idx[0]],
            b: p[idx[1]],
            h: p[idx[2]],
            l: p[idx[3]],
            d: p[idx[4]],
        })
        .collect())
}

/// Enumerates `(entries, processes)` pairs, keeping every `stride`-th one.
pub fn gen_comm_grid(spec: &GridSpec, stride: usize) -> Result<Vec<CommPoint>, BenchError> {
    let idx = spec.require(&["entries", "processes"])?;
    Ok(spec
        .points()?
        .into_iter()
        .step_by(stride.max(1))
        .map(|p| CommPoint {
            entries: p[idx[0]],
            processes: p[idx[1]],
        })
        .collect())
}

/// Compute-kernel sampling ranges used for the production benchmarks.
///
/// The hidden-dimension bound is kept at the printed 8129, so the last value
/// emitted is 7680; set `d.end = 8192` to include 8192.
pub fn default_compute_grid() -> GridSpec {
    GridSpec::new(vec![
        GridAxis::new("mp", 1, Step::Mul(2), 16),
        GridAxis::new("b", 4, Step::Mul(2), 8),
        GridAxis::new("h", 16, Step::Add(8), 80),
        GridAxis::new("l", 1024, Step::Add(512), 5120),
        GridAxis::new("d", 2048, Step::Add(512), 8129),
    ])
}

/// Communication sampling ranges, by operator name.
pub fn default_comm_grid(op: crate::workload::OperatorKind) -> Option<GridSpec> {
    use crate::workload::OperatorKind::*;
    let (start, step, end, procs) = match op {
        MpAllReduce => (20_900_000, 65_500, 134_000_000, Step::Mul(2)),
        DpAllReduce => (134_000_000, 2_400_000, 1_200_000_000, Step::Mul(2)),
        DpAllGather => (134_000_000, 2_400_000, 601_000_000, Step::Mul(2)),
        PpP2p => (2_090_000, 65_500, 134_000_000, Step::Fixed),
        _ => return None,
    };
    let proc_end = if procs == Step::Fixed { 2 } else { 8 };
    Some(GridSpec::new(vec![
        GridAxis::new("entries", start, Step::Add(step), end),
        GridAxis::new("processes", 2, procs, proc_end),
    ]))
}

/// Sampling ranges for the optimizer step: `[mp, d, encoders]`.
pub fn default_optimizer_grid() -> GridSpec {
    GridSpec::new(vec![
        GridAxis::new("mp", 1, Step::Mul(2), 16),
        GridAxis::new("d", 2048, Step::Add(512), 8129),
        GridAxis::new("encoders", 1, Step::Add(1), 24),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::OperatorKind;

    #[test]
    fn default_compute_axes() {
        let g = default_compute_grid();
        assert_eq!(
            g.axis("l").unwrap().values().unwrap(),
            (0..9).map(|i| 1024 + 512 * i).collect::<Vec<_>>()
        );
        assert_eq!(g.axis("mp").unwrap().values().unwrap(), vec![1, 2, 4, 8, 16]);
        assert_eq!(g.axis("b").unwrap().values().unwrap(), vec![4, 8]);
        assert_eq!(g.axis("h").unwrap().values().unwrap().len(), 9);
        let d = g.axis("d").unwrap().values().unwrap();
        assert_eq!(*d.last().unwrap(), 7680);
        assert_eq!(gen_compute_grid(&g).unwrap().len(), 5 * 2 * 9 * 9 * 12);
    }

    #[test]
    fn multiplicative_and_additive_axes() {
        assert_eq!(GridAxis::new("b", 4, Step::Mul(2), 8).values().unwrap(), vec![4, 8]);
        assert_eq!(
            GridAxis::new("entries", 100, Step::Add(50), 200).values().unwrap(),
            vec![100, 150, 200]
        );
        assert_eq!(GridAxis::new("p", 2, Step::Fixed, 2).values().unwrap(), vec![2]);
    }

    #[test]
    fn invalid_axes_rejected() {
        assert!(GridAxis::new("x", 5, Step::Add(1), 4).values().is_err());
        assert!(GridAxis::new("x", 1, Step::Add(0), 4).values().is_err());
        assert!(GridAxis::new("x", 1, Step::Mul(1), 4).values().is_err());
        assert!(gen_compute_grid(&GridSpec::new(vec![GridAxis::new("mp", 1, Step::Fixed, 1)])).is_err());
    }

    #[test]
    fn default_comm_processes() {
        let p2p = gen_comm_grid(&default_comm_grid(OperatorKind::PpP2p).unwrap(), 1).unwrap();
        assert!(p2p.iter().all(|p| p.processes == 2));
        let mp = default_comm_grid(OperatorKind::MpAllReduce).unwrap();
        assert_eq!(mp.axis("processes").unwrap().values().unwrap(), vec![2, 4, 8]);
        assert!(default_comm_grid(OperatorKind::Linear1).is_none());
    }

    #[test]
    fn comm_stride() {
        let g = GridSpec::new(vec![
            GridAxis::new("entries", 100, Step::Add(50), 200),
            GridAxis::new("processes", 2, Step::Mul(2), 8),
        ]);
        assert_eq!(gen_comm_grid(&g, 1).unwrap().len(), 9);
        assert_eq!(gen_comm_grid(&g, 4).unwrap().len(), 3);
    }

    #[test]
    fn step_parsing() {
        assert_eq!("+512".parse::<Step>().unwrap(), Step::Add(512));
        assert_eq!("x2".parse::<Step>().unwrap(), Step::Mul(2));
        assert_eq!("+6.55e4".parse::<Step>().unwrap(), Step::Add(65_500));
        assert_eq!("0".parse::<Step>().unwrap(), Step::Fixed);
        assert!("2".parse::<Step>().is_err());
    }

    #[test]
    fn grid_from_toml_keeps_axis_order() {
        let g: GridSpec = toml::from_str(
            r#"
            entries = { start = 2.09e7, step = "+6.55e4", end = 2.1e7 }
            processes = { start = 2, step = "x2", end = 8 }
            "#,
        )
        .unwrap();
        assert_eq!(g.axes[0].name, "entries");
        assert_eq!(g.axes[0].start, 20_900_000);
        assert_eq!(g.axes[0].values().unwrap(), vec![20_900_000, 20_965_500]);
        let text = toml::to_string(&g).unwrap();
        let back: GridSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, g);
    }

    proptest::proptest! {
        #[test]
        fn values_within_bounds(start in 1u64..1000, k in 1u64..50, span in 0u64..5000, mul in proptest::bool::ANY) {
            let step = if mul { Step::Mul(k + 1) } else { Step::Add(k) };
            let axis = GridAxis::new("a", start, step, start + span);
            let values = axis.values().unwrap();
            proptest::prop_assert_eq!(values[0], start);
            proptest::prop_assert!(values.iter().all(|&v| v >= start && v <= start + span));
            proptest::prop_assert!(values.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
