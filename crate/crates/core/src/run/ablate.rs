use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cmd_eval, cmd_track, SegmenterFactory};
use crate::backend::Backend;
use crate::config::{NoiseMode, PromptMode, RefinementMode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{write_json, DatasetManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Timestep,
    Prompt,
    Heads,
    Refinement,
    Points,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "timestep" => Ok(SweepKind::Timestep),
            "prompt" => Ok(SweepKind::Prompt),
            "heads" => Ok(SweepKind::Heads),
            "refinement" => Ok(SweepKind::Refinement),
            "points" => Ok(SweepKind::Points),
            other => Err(Error::InvalidArgument(format!("unknown sweep {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub settings: BTreeMap<String, String>,
    pub config: RunConfig,
}

/// A list of configurations derived from one base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub kind: SweepKind,
    pub points: Vec<GridPoint>,
}

fn point(base: &RunConfig, settings: &[(&str, String)], edit: impl FnOnce(&mut RunConfig)) -> GridPoint {
    let mut config = base.clone();
    edit(&mut config);
    GridPoint {
        label: settings
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(","),
        settings: settings.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        config,
    }
}

fn noise_name(n: NoiseMode) -> String {
    match n {
        NoiseMode::Inversion => "inversion",
        NoiseMode::Random => "random",
        NoiseMode::None => "none",
    }
    .into()
}

impl Sweep {
    /// Timesteps `1, 21, ..., 201` under random noise and inversion.
    pub fn timestep(base: &RunConfig, taus: &[usize], noises: &[NoiseMode]) -> Self {
        let mut points = Vec::new();
        for &noise in noises {
            for &tau in taus {
                points.push(point(
                    base,
                    &[("noise", noise_name(noise)), ("tau", tau.to_string())],
                    |c| {
                        c.propagation.noise = noise;
                        c.propagation.timestep = tau;
                    },
                ));
            }
        }
        Self { kind: SweepKind::Timestep, points }
    }

    pub fn prompt(base: &RunConfig, modes: &[PromptMode]) -> Self {
        let points = modes
            .iter()
            .map(|&m| {
                let name = format!("{m:?}").to_lowercase();
                point(base, &[("prompt", name)], |c| c.prompt.mode = m)
            })
            .collect();
        Self { kind: SweepKind::Prompt, points }
    }

    /// Learned prompts with uniform and with adapted head weights.
    pub fn heads(base: &RunConfig) -> Self {
        let points = [("uniform", false), ("adaptive", true)]
            .into_iter()
            .map(|(name, learn)| {
                point(base, &[("heads", name.to_string())], |c| {
                    c.prompt.mode = PromptMode::Learned;
                    c.optimizer.learn_head_weights = learn;
                })
            })
            .collect();
        Self { kind: SweepKind::Heads, points }
    }

    pub fn refinement(base: &RunConfig, modes: &[RefinementMode]) -> Self {
        let points = modes
            .iter()
            .map(|&m| {
                let name = format!("{m:?}").to_lowercase();
                point(base, &[("refinement", name)], |c| c.refinement.mode = m)
            })
            .collect();
        Self { kind: SweepKind::Refinement, points }
    }

    pub fn points(base: &RunConfig, ns: &[usize], ps: &[usize]) -> Self {
        let mut points = Vec::new();
        for &n in ns {
            for &p in ps {
                points.push(point(base, &[("n", n.to_string()), ("p", p.to_string())], |c| {
                    c.refinement.mode = RefinementMode::Segmenter;
                    c.refinement.points_per_set = n;
                    c.refinement.prompt_sets = p;
                }));
            }
        }
        Self { kind: SweepKind::Points, points }
    }

    /// The standard grid of each sweep.
    pub fn standard(kind: SweepKind, base: &RunConfig) -> Self {
        match kind {
            SweepKind::Timestep => Self::timestep(
                base,
                &(0..=10).map(|i| 1 + 20 * i).collect::<Vec<_>>(),
                &[NoiseMode::Random, NoiseMode::Inversion],
            ),
            SweepKind::Prompt => Self::prompt(
                base,
                &[PromptMode::Null, PromptMode::Class, PromptMode::Caption, PromptMode::Learned],
            ),
            SweepKind::Heads => Self::heads(base),
            SweepKind::Refinement => Self::refinement(
                base,
                &[RefinementMode::None, RefinementMode::Segmenter, RefinementMode::Crf],
            ),
            SweepKind::Points => Self::points(
                base,
                &[1, 2, 3, 5],
                &(1..=10).map(|i| 5 * i).collect::<Vec<_>>(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub settings: BTreeMap<String, String>,
    #[serde(rename = "J&F_m")]
    pub jf_m: Option<f64>,
    #[serde(rename = "J_m")]
    pub j_m: Option<f64>,
    #[serde(rename = "F_m")]
    pub f_m: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sweep: SweepKind,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "J&F_m", "J_m", "F_m", "status"])?;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            let status = r.error.clone().map(|e| format!("failed: {e}")).unwrap_or_else(|| "ok".into());
            w.write_record([r.label.clone(), fmt(r.jf_m), fmt(r.j_m), fmt(r.f_m), status])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Tracks and scores every grid point under `out_dir/<label>`, writing
/// `table.csv` and `table.json`. A failing point is marked in its row and
/// the sweep continues.
pub fn cmd_ablate<B: Backend>(
    backend: &B,
    manifest: &DatasetManifest,
    sweep: &Sweep,
    segmenters: Option<&dyn SegmenterFactory>,
    out_dir: &Path,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(sweep.points.len());
    for p in &sweep.points {
        let dir = out_dir.join(if p.label.is_empty() { "base" } else { &p.label });
        let mut config = p.config.clone();
        config.run.output_dir = dir.join("masks");
        let outcome = cmd_track(backend, &config, manifest, segmenters)
            .and_then(|_| cmd_eval(&config.run.output_dir, manifest, &dir.join("eval")));
        let row = match outcome {
            Ok(r) => AblationRow {
                label: p.label.clone(),
                settings: p.settings.clone(),
                jf_m: Some(r.summary.jf_m),
                j_m: Some(r.summary.j_m),
                f_m: Some(r.summary.f_m),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep point {} failed: {e}", p.label);
                AblationRow {
                    label: p.label.clone(),
                    settings: p.settings.clone(),
                    jf_m: None,
                    j_m: None,
                    f_m: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    let table = AblationTable { sweep: sweep.kind, rows };
    table.write_csv(&out_dir.join("table.csv"))?;
    write_json(&out_dir.join("table.json"), &table)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grids_have_reference_sizes() {
        let base = RunConfig::default();
        let t = Sweep::standard(SweepKind::Timestep, &base);
        assert_eq!(t.points.len(), 22);
        assert_eq!(t.points[0].label, "noise=random,tau=1");
        assert_eq!(t.points[21].config.propagation.timestep, 201);
        assert_eq!(t.points[21].config.propagation.noise, NoiseMode::Inversion);
        assert_eq!(Sweep::standard(SweepKind::Points, &base).points.len(), 40);
        assert_eq!(Sweep::standard(SweepKind::Prompt, &base).points.len(), 4);
        assert_eq!(Sweep::standard(SweepKind::Refinement, &base).points.len(), 3);
        let h = Sweep::standard(SweepKind::Heads, &base);
        assert!(!h.points[0].config.optimizer.learn_head_weights);
        assert!(h.points[1].config.optimizer.learn_head_weights);
    }

    #[test]
    fn empty_grid_gives_empty_table() {
        let base = RunConfig::default();
        let sweep = Sweep::points(&base, &[], &[5]);
        assert!(sweep.points.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let backend = crate::backend::SyntheticBackend::new(Default::default()).unwrap();
        let manifest = DatasetManifest {
            root: dir.path().into(),
            layout: crate::eval::Layout::Davis,
            sequences: vec![],
        };
        let table = cmd_ablate(&backend, &manifest, &sweep, None, dir.path()).unwrap();
        assert!(table.rows.is_empty());
        let csv = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }
}
