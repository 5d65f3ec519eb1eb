//! Routing forensics: which pathway wins where, per category, and how much
//! the classifier draws on each block's features.

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, NoRng, Variant};
use crate::tensor::{Real, RoutingMask, Tape};

/// Cells whose preference magnitude falls below this render as white
/// (mid-gray). Raw values are exported unchanged.
pub const NO_PREFERENCE_BAND: f64 = 0.1;

/// Win counts per (unit, feature map, category, pathway).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingProfile {
    pub units: usize,
    pub maps: usize,
    pub pathways: usize,
    pub categories: Vec<String>,
    wins: Vec<u64>,
}

impl RoutingProfile {
    pub fn new(units: usize, maps: usize, pathways: usize, categories: Vec<String>) -> Self {
        let n = units * maps * categories.len() * pathways;
        Self {
            units,
            maps,
            pathways,
            categories,
            wins: vec![0; n],
        }
    }

    fn offset(&self, unit: usize, map: usize, category: usize) -> usize {
        ((unit * self.maps + map) * self.categories.len() + category) * self.pathways
    }

    /// Win counts of every pathway for one cell.
    pub fn wins(&self, unit: usize, map: usize, category: usize) -> &[u64] {
        let o = self.offset(unit, map, category);
        &self.wins[o..o + self.pathways]
    }

    pub fn total(&self, unit: usize, map: usize, category: usize) -> u64 {
        self.wins(unit, map, category).iter().sum()
    }

    pub fn win_fraction(&self, unit: usize, map: usize, category: usize, pathway: usize) -> Option<f64> {
        let total = self.total(unit, map, category);
        (total > 0).then(|| self.wins(unit, map, category)[pathway] as f64 / total as f64)
    }

    /// `2 * (fraction won by pathway 0) - 1`; only defined for two pathways
    /// and non-empty cells.
    pub fn preference(&self, unit: usize, map: usize, category: usize) -> Option<f64> {
        if self.pathways != 2 {
            return None;
        }
        let w = self.wins(unit, map, category);
        let total = w[0] + w[1];
        (total > 0).then(|| (2 * w[0]) as f64 / total as f64 - 1.0)
    }

    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories.iter().position(|c| c == name).ok_or_else(|| {
            Error::usage(format!(
                "unknown category {name:?}; known: {}",
                self.categories.join(", ")
            ))
        })
    }

    /// Adds one unit's mask for a batch whose samples belong to `groups`.
    pub fn accumulate(&mut self, mask: &RoutingMask, groups: &[usize]) -> Result<()> {
        if mask.shape.len() != 4 || mask.shape[0] != groups.len() {
            return Err(Error::usage(format!(
                "mask shape {:?} does not match {} samples",
                mask.shape,
                groups.len()
            )));
        }
        if mask.unit >= self.units || mask.shape[1] != self.maps || mask.pathways != self.pathways {
            return Err(Error::usage(format!(
                "mask for unit {} ({} maps, {} pathways) does not fit a {}x{}x{} profile",
                mask.unit, mask.shape[1], mask.pathways, self.units, self.maps, self.pathways
            )));
        }
        let plane = mask.shape[2] * mask.shape[3];
        for (b, &g) in groups.iter().enumerate() {
            if g >= self.categories.len() {
                return Err(Error::data(format!("category {g} out of range")));
            }
            for map in 0..self.maps {
                let o = self.offset(mask.unit, map, g);
                let start = (b * self.maps + map) * plane;
                for &w in &mask.winners[start..start + plane] {
                    self.wins[o + w as usize] += 1;
                }
            }
        }
        Ok(())
    }

    /// Adds the counts of a profile with identical dimensions.
    pub fn merge(&mut self, other: &RoutingProfile) -> Result<()> {
        if (self.units, self.maps, self.pathways, &self.categories)
            != (other.units, other.maps, other.pathways, &other.categories)
        {
            return Err(Error::usage("cannot merge profiles of different dimensions"));
        }
        for (a, b) in self.wins.iter_mut().zip(&other.wins) {
            *a += b;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["unit".to_string(), "map".into(), "category".into()];
        header.extend((0..self.pathways).map(|k| format!("wins_p{k}")));
        header.extend(["total".into(), "preference".into()]);
        w.write_record(&header)?;
        for u in 0..self.units {
            for m in 0..self.maps {
                for (c, name) in self.categories.iter().enumerate() {
                    let mut row = vec![u.to_string(), m.to_string(), name.clone()];
                    row.extend(self.wins(u, m, c).iter().map(u64::to_string));
                    row.push(self.total(u, m, c).to_string());
                    row.push(self.preference(u, m, c).map(|p| p.to_string()).unwrap_or_default());
                    w.write_record(&row)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the output of [`RoutingProfile::write_csv`]. Categories keep
    /// their order of first appearance.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let pathways = header.iter().filter(|h| h.starts_with("wins_p")).count();
        if pathways == 0 || header.len() != pathways + 5 {
            return Err(Error::data(format!("unexpected profile header {:?}", header)));
        }
        let mut rows = Vec::new();
        let mut categories: Vec<String> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<u64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::data(format!("bad number {:?} in profile csv", &rec[i])))
            };
            let (u, m) = (num(0)? as usize, num(1)? as usize);
            let name = rec[2].to_string();
            let c = match categories.iter().position(|x| *x == name) {
                Some(c) => c,
                None => {
                    categories.push(name);
                    categories.len() - 1
                }
            };
            let wins = (0..pathways).map(|k| num(3 + k)).collect::<Result<Vec<_>>>()?;
            if wins.iter().sum::<u64>() != num(3 + pathways)? {
                return Err(Error::data(format!("row unit {u} map {m}: total does not match wins")));
            }
            rows.push((u, m, c, wins));
        }
        let units = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let maps = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut p = Self::new(units, maps, pathways, categories);
        for (u, m, c, wins) in rows {
            let o = p.offset(u, m, c);
            p.wins[o..o + pathways].copy_from_slice(&wins);
        }
        Ok(p)
    }

    /// Mean over units of the variance of the preference across categories,
    /// per map, sorted from most to least category-dependent.
    pub fn rank_maps(&self) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = (0..self.maps)
            .map(|m| {
                let mut score = 0.0;
                for u in 0..self.units {
                    let prefs: Vec<f64> = (0..self.categories.len())
                        .filter_map(|c| self.preference(u, m, c))
                        .collect();
                    if prefs.len() > 1 {
                        let mean = prefs.iter().sum::<f64>() / prefs.len() as f64;
                        score += prefs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / prefs.len() as f64;
                    }
                }
                (m, score / self.units.max(1) as f64)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    /// Binary PGM of one map: rows are units, columns categories.
    pub fn heatmap_pgm(&self, map: usize) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.categories.len(), self.units).into_bytes();
        for u in 0..self.units {
            for c in 0..self.categories.len() {
                out.push(preference_gray(self.preference(u, map, c)));
            }
        }
        out
    }

    /// Writes `map{index}.pgm` for the `top` highest-ranked maps.
    pub fn export_heatmaps(&self, dir: &Path, top: usize) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (m, _) in self.rank_maps().into_iter().take(top) {
            let path = dir.join(format!("map{m:03}.pgm"));
            fs::write(&path, self.heatmap_pgm(m))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Gray level of a preference: -1 is black, +1 white, no preference 128.
pub fn preference_gray(p: Option<f64>) -> u8 {
    match p {
        Some(p) if p.abs() >= NO_PREFERENCE_BAND => ((p.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8,
        _ => 128,
    }
}

/// Streams `dataset` through the model in eval mode, capturing the routing
/// of `block`, with samples grouped by label.
pub fn trace<T: Real>(
    model: &mut Model<T>,
    dataset: &Dataset,
    normalizer: &Normalizer,
    block: usize,
    batch_size: usize,
) -> Result<RoutingProfile> {
    let groups: Vec<usize> = (0..dataset.len()).map(|i| dataset.label(i)).collect();
    trace_groups(model, dataset, normalizer, block, batch_size, &groups, dataset.class_names.clone())
}

/// Like [`trace`], with an explicit group per sample.
pub fn trace_groups<T: Real>(
    model: &mut Model<T>,
    dataset: &Dataset,
    normalizer: &Normalizer,
    block: usize,
    batch_size: usize,
    groups: &[usize],
    group_names: Vec<String>,
) -> Result<RoutingProfile> {
    let k = model.config.k;
    let stack = model
        .network
        .blocks
        .get(block)
        .ok_or_else(|| Error::usage(format!("no block {block}")))?;
    if k < 2 || stack.copa_units().is_empty() {
        return Err(Error::config("routing capture needs a model with at least two pathways"));
    }
    if groups.len() != dataset.len() {
        return Err(Error::usage("one group per sample required"));
    }
    let units = stack.units.len();
    let maps = model.config.stage_widths()[block];
    let mut profile = RoutingProfile::new(units, maps, k, group_names);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let masks = capture_masks(model, dataset, normalizer, block, chunk)?;
        let g: Vec<usize> = chunk.iter().map(|&i| groups[i]).collect();
        for mask in &masks {
            profile.accumulate(mask, &g)?;
        }
    }
    Ok(profile)
}

/// Raw eval-mode routing masks of `block` for the given samples.
pub fn capture_masks<T: Real>(
    model: &mut Model<T>,
    dataset: &Dataset,
    normalizer: &Normalizer,
    block: usize,
    indices: &[usize],
) -> Result<Vec<RoutingMask>> {
    let (x, _) = dataset.batch::<T, NoRng>(indices, normalizer, None);
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        capture_block: Some(block),
        ..ForwardOptions::eval()
    };
    Ok(model.forward(&mut tape, x, opts, &mut NoRng)?.routing)
}

/// Mean over (unit, map) cells of the summed absolute difference of
/// pathway win fractions between two categories. With two pathways this is
/// the mean absolute preference difference.
pub fn profile_distance(profile: &RoutingProfile, cat_a: &str, cat_b: &str) -> Result<f64> {
    let a = profile.category_index(cat_a)?;
    let b = profile.category_index(cat_b)?;
    let mut sum = 0.0;
    let mut cells = 0usize;
    for u in 0..profile.units {
        for m in 0..profile.maps {
            let (ta, tb) = (profile.total(u, m, a), profile.total(u, m, b));
            if ta == 0 || tb == 0 {
                return Err(Error::usage(format!(
                    "category {} has no samples",
                    if ta == 0 { cat_a } else { cat_b }
                )));
            }
            let d: f64 = (0..profile.pathways)
                .map(|k| (profile.wins(u, m, a)[k] as f64 / ta as f64 - profile.wins(u, m, b)[k] as f64 / tb as f64).abs())
                .sum();
            sum += d;
            cells += 1;
        }
    }
    Ok(if cells == 0 { 0.0 } else { sum / cells as f64 })
}

/// L1 norms of the classifier weights grouped by the block that produced
/// the features, per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ReuseReport {
    pub layout: Vec<Range<usize>>,
    pub classes: usize,
    /// `norms[block * classes + class]`.
    pub norms: Vec<f64>,
}

impl ReuseReport {
    pub fn norm(&self, block: usize, class: usize) -> f64 {
        self.norms[block * self.classes + class]
    }

    pub fn block_total(&self, block: usize) -> f64 {
        self.norms[block * self.classes..(block + 1) * self.classes].iter().sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["block", "channel_start", "channel_end", "class", "l1_norm"])?;
        for (b, range) in self.layout.iter().enumerate() {
            for c in 0..self.classes {
                w.write_record([
                    b.to_string(),
                    range.start.to_string(),
                    range.end.to_string(),
                    c.to_string(),
                    self.norm(b, c).to_string(),
                ])?;
            }
            w.write_record([
                b.to_string(),
                range.start.to_string(),
                range.end.to_string(),
                "total".into(),
                self.block_total(b).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn reuse_report<T: Real>(model: &Model<T>) -> Result<ReuseReport> {
    if model.config.variant != Variant::R {
        return Err(Error::config(
            "reuse report needs the cross-block (R) variant; the plain variant has no concatenation",
        ));
    }
    let w = model.params.get(model.network.fc_weight);
    let classes = w.shape()[1];
    let layout = model.network.classifier_layout.clone();
    let mut norms = vec![0.0; layout.len() * classes];
    for (b, range) in layout.iter().enumerate() {
        for row in range.clone() {
            for c in 0..classes {
                norms[b * classes + c] += w.data()[row * classes + c].to_f64_lossy().abs();
            }
        }
    }
    Ok(ReuseReport {
        layout,
        classes,
        norms,
    })
}
