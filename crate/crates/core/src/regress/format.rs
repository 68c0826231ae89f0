//! Plain-text model files.
//!
//! ```text
//! perfmodel-regressor 1
//! op <operator name>
//! direction fwd|bwd|na
//! kind forest|gbt
//! log_target true|false
//! base <real>
//! n_trees <int>
//! max_depth <int>
//! min_samples_leaf <int>
//! learning_rate <real>
//! bootstrap true|false
//! max_features all|<int>
//! n_samples <int>
//! val_mape none|<real>
//! bounds <k> <lo_0> <hi_0> ... <lo_k-1> <hi_k-1>
//! trees <count>
//! tree <node count>
//! S <feature> <threshold> <left> <right>     one line per node, root first
//! L <value>
//! ...
//! end
//! ```
//!
//! Reals are written in shortest round-trip form, so a loaded model predicts
//! bit-identically to the one saved.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tree::{Tree, TreeNode};
use super::{Hyperparams, ModelKind, RegressError, TrainStats, TrainedRegressor};
use crate::workload::{Direction, OperatorKind};

const MAGIC: &str = "perfmodel-regressor 1";

pub fn write_model<W: Write>(mut out: W, m: &TrainedRegressor) -> Result<(), RegressError> {
    let hp = &m.hyperparams;
    let mut s = String::new();
    s.push_str(MAGIC);
    s.push('\n');
    s.push_str(&format!("op {}\n", m.op.name()));
    s.push_str(&format!("direction {}\n", m.direction));
    s.push_str(&format!("kind {}\n", m.kind.as_str()));
    s.push_str(&format!("log_target {}\n", m.log_target));
    s.push_str(&format!("base {}\n", m.base));
    s.push_str(&format!("n_trees {}\n", hp.n_trees));
    s.push_str(&format!("max_depth {}\n", hp.max_depth));
    s.push_str(&format!("min_samples_leaf {}\n", hp.min_samples_leaf));
    s.push_str(&format!("learning_rate {}\n", hp.learning_rate));
    s.push_str(&format!("bootstrap {}\n", hp.bootstrap));
    match hp.max_features {
        Some(k) => s.push_str(&format!("max_features {k}\n")),
        None => s.push_str("max_features all\n"),
    }
    s.push_str(&format!("n_samples {}\n", m.train_stats.n_samples));
    match m.train_stats.val_mape {
        Some(v) => s.push_str(&format!("val_mape {v}\n")),
        None => s.push_str("val_mape none\n"),
    }
    s.push_str(&format!("bounds {}", m.feature_bounds.len()));
    for (lo, hi) in &m.feature_bounds {
        s.push_str(&format!(" {lo} {hi}"));
    }
    s.push('\n');
    s.push_str(&format!("trees {}\n", m.trees.len()));
    for t in &m.trees {
        s.push_str(&format!("tree {}\n", t.nodes.len()));
        for node in &t.nodes {
            match *node {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => s.push_str(&format!("S {feature} {threshold} {left} {right}\n")),
                TreeNode::Leaf { value } => s.push_str(&format!("L {value}\n")),
            }
        }
    }
    s.push_str("end\n");
    out.write_all(s.as_bytes())?;
    Ok(())
}

/// Line reader that remembers the byte offset of every token.
struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

struct Line<'a> {
    offset: usize,
    tokens: Vec<(usize, &'a str)>,
}

impl<'a> Cursor<'a> {
    fn err(offset: usize, message: impl Into<String>) -> RegressError {
        RegressError::Format {
            offset,
            message: message.into(),
        }
    }

    fn line(&mut self) -> Result<Line<'a>, RegressError> {
        if self.pos >= self.text.len() {
            return Err(Self::err(self.pos, "unexpected end of file"));
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let (body, advance) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.pos += advance;
        let mut tokens = Vec::new();
        let mut i = 0;
        for tok in body.split(' ') {
            if !tok.is_empty() {
                tokens.push((start + i, tok));
            }
            i += tok.len() + 1;
        }
        Ok(Line {
            offset: start,
            tokens,
        })
    }

    /// Reads `key <value>` and returns the value token.
    fn field(&mut self, key: &str) -> Result<(usize, &'a str), RegressError> {
        let line = self.line()?;
        match line.tokens.as_slice() {
            [(_, k), v] if *k == key => Ok(*v),
            _ => Err(Self::err(line.offset, format!("expected `{key} <value>`"))),
        }
    }
}

fn parse<T: std::str::FromStr>((offset, tok): (usize, &str), what: &str) -> Result<T, RegressError> {
    tok.parse()
        .map_err(|_| Cursor::err(offset, format!("invalid {what} `{tok}`")))
}

/// Parses a model from its text form.
pub fn parse_model(text: &str) -> Result<TrainedRegressor, RegressError> {
    let mut c = Cursor { text, pos: 0 };
    let magic = c.line()?;
    if text[magic.offset..].lines().next() != Some(MAGIC) {
        return Err(Cursor::err(0, "missing model header"));
    }
    let op_tok = c.field("op")?;
    let op: OperatorKind = parse(op_tok, "operator")?;
    let direction: Direction = parse(c.field("direction")?, "direction")?;
    let kind_tok = c.field("kind")?;
    let kind = match kind_tok.1 {
        "forest" => ModelKind::Forest,
        "gbt" => ModelKind::Gbt,
        other => return Err(Cursor::err(kind_tok.0, format!("unknown model kind `{other}`"))),
    };
    let log_target: bool = parse(c.field("log_target")?, "flag")?;
    let base: f64 = parse(c.field("base")?, "real")?;
    let n_trees: usize = parse(c.field("n_trees")?, "integer")?;
    let max_depth: usize = parse(c.field("max_depth")?, "integer")?;
    let min_samples_leaf: usize = parse(c.field("min_samples_leaf")?, "integer")?;
    let learning_rate: f64 = parse(c.field("learning_rate")?, "real")?;
    let bootstrap: bool = parse(c.field("bootstrap")?, "flag")?;
    let mf = c.field("max_features")?;
    let max_features = match mf.1 {
        "all" => None,
        _ => Some(parse(mf, "integer")?),
    };
    let n_samples: usize = parse(c.field("n_samples")?, "integer")?;
    let vm = c.field("val_mape")?;
    let val_mape = match vm.1 {
        "none" => None,
        _ => Some(parse(vm, "real")?),
    };

    let line = c.line()?;
    let toks = &line.tokens;
    if toks.first().map(|t| t.1) != Some("bounds") || toks.len() < 2 {
        return Err(Cursor::err(line.offset, "expected `bounds <k> ...`"));
    }
    let k: usize = parse(toks[1], "integer")?;
    if toks.len() != 2 + 2 * k {
        return Err(Cursor::err(line.offset, format!("bounds line needs {} values", 2 * k)));
    }
    let mut feature_bounds = Vec::with_capacity(k);
    for i in 0..k {
        feature_bounds.push((parse(toks[2 + 2 * i], "real")?, parse(toks[3 + 2 * i], "real")?));
    }

    let count: usize = parse(c.field("trees")?, "integer")?;
    let mut trees = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (off, tok) = c.field("tree")?;
        let n: usize = parse((off, tok), "node count")?;
        if n == 0 {
            return Err(Cursor::err(off, "tree has no nodes"));
        }
        let mut nodes = Vec::with_capacity(n.min(1 << 20));
        for idx in 0..n {
            let line = c.line()?;
            let node = match line.tokens.as_slice() {
                [(_, "L"), v] => TreeNode::Leaf {
                    value: parse(*v, "leaf value")?,
                },
                [(_, "S"), f, t, l, r] => {
                    let feature: usize = parse(*f, "feature index")?;
                    let left: usize = parse(*l, "child index")?;
                    let right: usize = parse(*r, "child index")?;
                    if feature >= k || left <= idx || right <= idx || left >= n || right >= n {
                        return Err(Cursor::err(line.offset, "split refers outside its tree"));
                    }
                    TreeNode::Split {
                        feature,
                        threshold: parse(*t, "threshold")?,
                        left,
                        right,
                    }
                }
                _ => return Err(Cursor::err(line.offset, "expected `S ...` or `L ...` node line")),
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
    }
    let end = c.line()?;
    if end.tokens.as_slice() != [(end.offset, "end")] {
        return Err(Cursor::err(end.offset, "expected `end`"));
    }
    if c.pos < text.len() && !text[c.pos..].trim().is_empty() {
        return Err(Cursor::err(c.pos, "trailing data after `end`"));
    }
    Ok(TrainedRegressor {
        op,
        direction,
        kind,
        trees,
        base,
        log_target,
        hyperparams: Hyperparams {
            n_trees,
            max_depth,
            min_samples_leaf,
            learning_rate,
            bootstrap,
            max_features,
        },
        train_stats: TrainStats { n_samples, val_mape },
        feature_bounds,
    })
}

pub fn save_model(model: &TrainedRegressor, path: &Path) -> Result<(), RegressError> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedRegressor, RegressError> {
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Cursor::err(e.valid_up_to(), "not UTF-8"))?;
    parse_model(text)
}
