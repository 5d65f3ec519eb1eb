use std::fmt;
use std::str::FromStr;

use crate::copa::PathwayKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Plain,
    /// Cross-block shortcuts: each block's pooled input is concatenated to
    /// its output, and the classifier sees features of every block.
    R,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "R" | "r" => Ok(Variant::R),
            other => Err(Error::config(format!("unknown variant {other:?} (plain or R)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::R => "R",
        })
    }
}

impl FromStr for PathwayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottleneck" => Ok(PathwayKind::Bottleneck),
            "basic" => Ok(PathwayKind::Basic),
            other => Err(Error::config(format!("unknown pathway kind {other:?} (bottleneck or basic)"))),
        }
    }
}

impl fmt::Display for PathwayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathwayKind::Bottleneck => "bottleneck",
            PathwayKind::Basic => "basic",
        })
    }
}

/// Full description of a CIFAR-style competitive pathway network.
///
/// `widths` and `mids` are the per-stage output and bottleneck widths at
/// `m = 1`; both are multiplied by `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub depth: usize,
    pub k: usize,
    pub m: usize,
    pub variant: Variant,
    pub pathway: PathwayKind,
    pub widths: [usize; 3],
    pub mids: [usize; 3],
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub input_channels: usize,
    pub input_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 164,
            k: 2,
            m: 1,
            variant: Variant::Plain,
            pathway: PathwayKind::Bottleneck,
            widths: [45, 90, 180],
            mids: [12, 23, 45],
            num_classes: 10,
            dropout_rate: 0.2,
            input_channels: 3,
            input_size: 32,
        }
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::config(format!("{key}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::config(format!("{key} needs three comma-separated values, got {value:?}")))
}

fn parse_num<N: FromStr>(key: &str, value: &str) -> Result<N>
where
    N::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::config(format!("{key}={value}: {e}")))
}

impl NetworkConfig {
    pub const KEYS: [&'static str; 11] = [
        "depth",
        "k",
        "m",
        "variant",
        "pathway",
        "widths",
        "mids",
        "classes",
        "dropout",
        "input_channels",
        "input_size",
    ];

    /// Depth of a small desk-scale network: `units` units per stage.
    pub fn with_units(units: usize, k: usize, m: usize) -> Self {
        let mut cfg = Self {
            k,
            m,
            ..Self::default()
        };
        cfg.depth = units * 9 + 2;
        cfg
    }

    pub fn convs_per_unit(&self) -> usize {
        self.pathway.convs()
    }

    /// `depth = 3 stages * units * convs per pathway + 2` (stem and classifier).
    pub fn units_per_stage(&self) -> Result<usize> {
        let per_unit = 3 * self.convs_per_unit();
        if self.depth < 2 + per_unit || !(self.depth - 2).is_multiple_of(per_unit) {
            return Err(Error::config(format!(
                "depth {} is not 3 stages x units x {} convs + 2 for {} pathways \
                 (need depth - 2 = {} to be a positive multiple of {})",
                self.depth,
                self.convs_per_unit(),
                self.pathway,
                self.depth.saturating_sub(2),
                per_unit
            )));
        }
        Ok((self.depth - 2) / per_unit)
    }

    pub fn stage_widths(&self) -> [usize; 3] {
        self.widths.map(|w| w * self.m)
    }

    pub fn stage_mids(&self) -> [usize; 3] {
        match self.pathway {
            PathwayKind::Bottleneck => self.mids.map(|w| w * self.m),
            PathwayKind::Basic => self.stage_widths(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.units_per_stage()?;
        if self.k == 0 || self.k > 255 {
            return Err(Error::config(format!("k = {} outside 1..=255", self.k)));
        }
        if self.m == 0 {
            return Err(Error::config("m must be positive"));
        }
        if self.widths.contains(&0) || self.mids.contains(&0) {
            return Err(Error::config("stage widths must be positive"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout_rate)));
        }
        if self.input_size < 4 || !self.input_size.is_multiple_of(4) {
            return Err(Error::config(format!(
                "input size {} must be a multiple of 4 (two 2x2 poolings)",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "depth" => self.depth = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "m" => self.m = parse_num(key, value)?,
            "variant" => self.variant = value.trim().parse()?,
            "pathway" => self.pathway = value.trim().parse()?,
            "widths" => self.widths = parse_triple(key, value)?,
            "mids" => self.mids = parse_triple(key, value)?,
            "classes" => self.num_classes = parse_num(key, value)?,
            "dropout" => self.dropout_rate = parse_num(key, value)?,
            "input_channels" => self.input_channels = parse_num(key, value)?,
            "input_size" => self.input_size = parse_num(key, value)?,
            _ => {
                return Err(Error::config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let triple = |t: [usize; 3]| format!("{},{},{}", t[0], t[1], t[2]);
        vec![
            ("depth", self.depth.to_string()),
            ("k", self.k.to_string()),
            ("m", self.m.to_string()),
            ("variant", self.variant.to_string()),
            ("pathway", self.pathway.to_string()),
            ("widths", triple(self.widths)),
            ("mids", triple(self.mids)),
            ("classes", self.num_classes.to_string()),
            ("dropout", self.dropout_rate.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("input_size", self.input_size.to_string()),
        ]
    }

    /// Flat `key=value` text, one setting per line.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_kv_lines(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(format!("expected key=value, got {l:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_164_has_18_units_per_stage() {
        assert_eq!(NetworkConfig::default().units_per_stage().unwrap(), 18);
    }

    #[test]
    fn inconsistent_depth_reports_arithmetic() {
        let cfg = NetworkConfig {
            depth: 100,
            ..NetworkConfig::default()
        };
        let err = cfg.units_per_stage().unwrap_err().to_string();
        assert!(err.contains("98"), "{err}");
        assert!(err.contains("multiple of 9"), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = NetworkConfig::default();
        cfg.set("variant", "R").unwrap();
        cfg.set("m", "2").unwrap();
        cfg.set("dropout", "0.1").unwrap();
        assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = NetworkConfig::default().set("width", "3").unwrap_err().to_string();
        assert!(err.contains("depth, k, m"), "{err}");
    }

    #[test]
    fn widths_scale_linearly_with_m() {
        let cfg = NetworkConfig {
            m: 3,
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.stage_widths(), [135, 270, 540]);
        assert_eq!(cfg.stage_mids(), [36, 69, 135]);
    }
}
