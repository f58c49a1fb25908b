//! Flag value parsers.

use std::str::FromStr;

use hshap::Tolerance;

/// Which model scores the masked inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// Pixel MIL oracle built from the ground-truth mask.
    Oracle,
    /// Patch oracle: a cross counts once `T` of its pixels are kept.
    Patch(usize),
    /// External server, command split on whitespace.
    Bridge(Vec<String>),
}

impl ModelSpec {
    pub fn needs_mask(&self) -> bool {
        !matches!(self, ModelSpec::Bridge(_))
    }
}

impl FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "oracle" {
            return Ok(ModelSpec::Oracle);
        }
        if let Some(t) = s.strip_prefix("patch:") {
            let t: usize = t.parse().map_err(|_| format!("bad patch threshold {t:?}"))?;
            if t == 0 {
                return Err("patch threshold must be positive".into());
            }
            return Ok(ModelSpec::Patch(t));
        }
        if let Some(cmd) = s.strip_prefix("bridge:") {
            let parts: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if parts.is_empty() {
                return Err("bridge: needs a server command".into());
            }
            return Ok(ModelSpec::Bridge(parts));
        }
        Err(format!("unknown model {s:?}; expected oracle, patch:T or bridge:CMD"))
    }
}

/// `abs:F` or `rel:P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau(pub Tolerance);

impl FromStr for Tau {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, value) = s.split_once(':').ok_or_else(|| format!("expected abs:F or rel:P, got {s:?}"))?;
        let v: f64 = value.parse().map_err(|_| format!("bad tolerance value {value:?}"))?;
        let tolerance = match kind {
            "abs" => Tolerance::Absolute(v),
            "rel" => Tolerance::RelativePercentile(v),
            _ => return Err(format!("unknown tolerance kind {kind:?}")),
        };
        tolerance.validate().map_err(|e| e.to_string())?;
        Ok(Tau(tolerance))
    }
}

/// `HxW`, e.g. `64x64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
        let parse = |v: &str| v.parse::<usize>().ok().filter(|&v| v > 0);
        match (parse(h), parse(w)) {
            (Some(height), Some(width)) => Ok(Size { height, width }),
            _ => Err(format!("bad size {s:?}")),
        }
    }
}

/// Inclusive count range `LO-HI` or a single count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountRange(pub usize, pub usize);

impl FromStr for CountRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad count {v:?}"));
        let (lo, hi) = match s.split_once('-') {
            Some((lo, hi)) => (parse(lo)?, parse(hi)?),
            None => {
                let v = parse(s)?;
                (v, v)
            }
        };
        if lo > hi {
            return Err(format!("empty range {s:?}"));
        }
        Ok(CountRange(lo, hi))
    }
}

/// Ablation sizes: `all`, or a comma list of counts and `A-B` ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ks {
    All,
    List(Vec<usize>),
}

impl Ks {
    pub fn resolve(&self, n: usize) -> Vec<usize> {
        match self {
            Ks::All => (0..=n).collect(),
            Ks::List(v) => v.clone(),
        }
    }
}

impl FromStr for Ks {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(Ks::All);
        }
        let mut out = Vec::new();
        for part in s.split(',') {
            let CountRange(lo, hi) = part.parse()?;
            out.extend(lo..=hi);
        }
        if out.windows(2).any(|w| w[0] >= w[1]) {
            return Err("ablation sizes must be strictly ascending".into());
        }
        Ok(Ks::List(out))
    }
}

/// Comma-separated probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoGrid(pub Vec<f64>);

impl FromStr for RhoGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values = s
            .split(',')
            .map(|v| {
                let r: f64 = v.trim().parse().map_err(|_| format!("bad probability {v:?}"))?;
                if (0.0..=1.0).contains(&r) {
                    Ok(r)
                } else {
                    Err(format!("probability {r} outside [0, 1]"))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RhoGrid(values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn models() {
        assert_eq!("oracle".parse::<ModelSpec>().unwrap(), ModelSpec::Oracle);
        assert_eq!("patch:12".parse::<ModelSpec>().unwrap(), ModelSpec::Patch(12));
        assert_eq!(
            "bridge:python3 serve.py --fast".parse::<ModelSpec>().unwrap(),
            ModelSpec::Bridge(vec!["python3".into(), "serve.py".into(), "--fast".into()])
        );
        for bad in ["cnn", "patch:0", "patch:x", "bridge:  "] {
            assert!(bad.parse::<ModelSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn tolerances() {
        assert_eq!("abs:0".parse::<Tau>().unwrap().0, Tolerance::Absolute(0.0));
        assert_eq!("rel:70".parse::<Tau>().unwrap().0, Tolerance::RelativePercentile(70.0));
        for bad in ["70", "rel:101", "abs:nan", "pct:5"] {
            assert!(bad.parse::<Tau>().is_err(), "{bad}");
        }
    }

    #[test]
    fn sizes_and_ranges() {
        assert_eq!("100x120".parse::<Size>().unwrap(), Size { height: 100, width: 120 });
        assert!("0x5".parse::<Size>().is_err());
        assert_eq!("1-6".parse::<CountRange>().unwrap(), CountRange(1, 6));
        assert_eq!("3".parse::<CountRange>().unwrap(), CountRange(3, 3));
        assert!("4-2".parse::<CountRange>().is_err());
    }

    #[test]
    fn ablation_sizes() {
        assert_eq!("0-3,10".parse::<Ks>().unwrap(), Ks::List(vec![0, 1, 2, 3, 10]));
        assert_eq!("all".parse::<Ks>().unwrap().resolve(2), vec![0, 1, 2]);
        assert!("5,2".parse::<Ks>().is_err());
        assert_eq!("0,0.5,1".parse::<RhoGrid>().unwrap(), RhoGrid(vec![0.0, 0.5, 1.0]));
        assert!("1.5".parse::<RhoGrid>().is_err());
    }
}
