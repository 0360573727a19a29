//! Persistent run logs.
//!
//! Every run writes four CSV files sharing a stem: the per-step trajectory,
//! the per-replan target log, the RMSE checkpoints, and a key-value metadata
//! file. Floats are written with Rust's shortest round-trip formatting, so a
//! parsed record compares equal to the one that was written.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::types::AugmentedState;

/// Which data collection strategy produced a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Region-targeted exploration through the planner.
    Local,
    /// Greedy one-step entropy maximization.
    Entropy,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Local => "local",
            Strategy::Entropy => "entropy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Strategy::Local),
            "entropy" => Ok(Strategy::Entropy),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?}, expected local or entropy"
            ))),
        }
    }
}

/// One observed step, together with the exploration target that was active
/// when the input was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
    /// True on steps where the target was re-selected and the plan re-solved.
    pub is_replan: bool,
    /// The target point the controller was steering toward at this step.
    pub xi_star: AugmentedState,
    /// Information score of that target when it was selected.
    pub mi_score: f64,
}

/// Hyperparameters of one output dimension's GP.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperSnapshot {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

/// Bookkeeping captured each time the target point was re-selected.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplanEvent {
    /// Step index at which the selection happened.
    pub t: usize,
    /// Training set size at selection time.
    pub n_data: usize,
    pub xi_star: AugmentedState,
    /// Score of the selected target.
    pub mi_star: f64,
    /// Per-output-dimension contributions to that score.
    pub per_dim: Vec<f64>,
    /// Score of the current location (x_t paired with the first planned
    /// input), needed by the information-drop diagnostics.
    pub mi_current: f64,
    /// Hyperparameters in effect at selection time, one entry per output.
    pub hypers: Vec<HyperSnapshot>,
}

/// Model error measured on held-out region samples at a fixed cadence.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub checkpoint: usize,
    pub t: usize,
    pub rmse: f64,
}

/// Wall-clock accounting for one run, in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Timings {
    pub total_s: f64,
    pub plan_s: f64,
    pub train_s: f64,
}

impl Default for Timings {
    fn default() -> Self {
        Timings {
            total_s: 0.0,
            plan_s: 0.0,
            train_s: 0.0,
        }
    }
}

/// Everything one run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub system: String,
    pub strategy: Strategy,
    /// This run's own seed.
    pub seed: u64,
    /// Experiment-level seed and this run's index within it, kept so the
    /// held-out RMSE sample set can be re-derived later.
    pub master_seed: u64,
    pub run_index: usize,
    pub n_rmse_samples: usize,
    pub noise_std: f64,
    pub d_x: usize,
    pub d_u: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub transitions: Vec<Transition>,
    pub replans: Vec<ReplanEvent>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_hypers: Vec<HyperSnapshot>,
    pub timings: Timings,
    pub success: bool,
}

impl RunRecord {
    /// Structural checks: contiguous step indices, an unbroken state chain,
    /// consistent dimensions, nonnegative RMSE, and a checkpoint count that
    /// matches the cadence on successful runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InternalState(msg));
        if self.d_x == 0 || self.d_u == 0 {
            return bad("state and input must be nonempty".into());
        }
        for (i, tr) in self.transitions.iter().enumerate() {
            if tr.t != i {
                return bad(format!("transition {i} has step index {}", tr.t));
            }
            if tr.x.len() != self.d_x
                || tr.x_next.len() != self.d_x
                || tr.u.len() != self.d_u
                || tr.xi_star.dim() != self.d_x + self.d_u
            {
                return bad(format!("transition {i} has inconsistent dimensions"));
            }
            if i > 0 && self.transitions[i - 1].x_next != tr.x {
                return bad(format!("state chain broken entering step {i}"));
            }
        }
        for cp in &self.checkpoints {
            if cp.rmse.is_nan() || cp.rmse < 0.0 {
                return bad(format!("checkpoint {} has rmse {}", cp.checkpoint, cp.rmse));
            }
        }
        if self.success {
            if self.transitions.len() != self.total_steps {
                return bad(format!(
                    "successful run logged {} of {} steps",
                    self.transitions.len(),
                    self.total_steps
                ));
            }
            if let Some(quot) = self.total_steps.checked_div(self.checkpoint_every) {
                let expected = quot + 1;
                if self.checkpoints.len() != expected {
                    return bad(format!(
                        "expected {expected} checkpoints at cadence {}, found {}",
                        self.checkpoint_every,
                        self.checkpoints.len()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Writes `{stem}.csv`, `{stem}_replans.csv`, `{stem}_checkpoints.csv`
    /// and `{stem}_meta.csv` under `dir`, creating it if needed.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let write = |name: String, body: String| -> Result<()> {
            let path = dir.join(&name);
            fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))
        };
        write(format!("{stem}.csv"), self.main_csv())?;
        write(format!("{stem}_replans.csv"), self.replans_csv())?;
        write(format!("{stem}_checkpoints.csv"), self.checkpoints_csv())?;
        write(format!("{stem}_meta.csv"), self.meta_csv())?;
        Ok(())
    }

    fn main_csv(&self) -> String {
        let mut head = vec!["t".to_string()];
        head.extend((0..self.d_x).map(|i| format!("x{i}")));
        head.extend((0..self.d_u).map(|i| format!("u{i}")));
        head.extend((0..self.d_x).map(|i| format!("x_next{i}")));
        head.push("is_replan".into());
        head.extend((0..self.d_x + self.d_u).map(|i| format!("xi_star{i}")));
        head.push("mi_score".into());
        let mut out = head.join(",");
        out.push('\n');
        for tr in &self.transitions {
            let mut row = vec![tr.t.to_string()];
            row.extend(tr.x.iter().map(|v| v.to_string()));
            row.extend(tr.u.iter().map(|v| v.to_string()));
            row.extend(tr.x_next.iter().map(|v| v.to_string()));
            row.push(if tr.is_replan { "1" } else { "0" }.into());
            row.extend(tr.xi_star.as_slice().iter().map(|v| v.to_string()));
            row.push(tr.mi_score.to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    fn replans_csv(&self) -> String {
        let mut head = vec!["t".to_string(), "n_data".into()];
        head.extend((0..self.d_x + self.d_u).map(|i| format!("xi_star{i}")));
        head.push("mi_star".into());
        head.extend((0..self.d_x).map(|i| format!("mi_dim{i}")));
        head.push("mi_current".into());
        for d in 0..self.d_x {
            head.push(format!("signal_variance{d}"));
            head.push(format!("noise_variance{d}"));
            head.push(format!("lengthscales{d}"));
        }
        let mut out = head.join(",");
        out.push('\n');
        for ev in &self.replans {
            let mut row = vec![ev.t.to_string(), ev.n_data.to_string()];
            row.extend(ev.xi_star.as_slice().iter().map(|v| v.to_string()));
            row.push(ev.mi_star.to_string());
            row.extend(ev.per_dim.iter().map(|v| v.to_string()));
            row.push(ev.mi_current.to_string());
            for h in &ev.hypers {
                row.push(h.signal_variance.to_string());
                row.push(h.noise_variance.to_string());
                row.push(join_semis(&h.lengthscales));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    fn checkpoints_csv(&self) -> String {
        let mut out = String::from("checkpoint,t,rmse\n");
        for cp in &self.checkpoints {
            out.push_str(&format!("{},{},{}\n", cp.checkpoint, cp.t, cp.rmse));
        }
        out
    }

    fn meta_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push(',');
            out.push_str(&v);
            out.push('\n');
        };
        kv("system", self.system.clone());
        kv("strategy", self.strategy.to_string());
        kv("seed", self.seed.to_string());
        kv("master_seed", self.master_seed.to_string());
        kv("run_index", self.run_index.to_string());
        kv("n_rmse_samples", self.n_rmse_samples.to_string());
        kv("noise_std", self.noise_std.to_string());
        kv("d_x", self.d_x.to_string());
        kv("d_u", self.d_u.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("success", self.success.to_string());
        kv("total_s", self.timings.total_s.to_string());
        kv("plan_s", self.timings.plan_s.to_string());
        kv("train_s", self.timings.train_s.to_string());
        for (d, h) in self.final_hypers.iter().enumerate() {
            kv(&format!("signal_variance{d}"), h.signal_variance.to_string());
            kv(&format!("noise_variance{d}"), h.noise_variance.to_string());
            kv(&format!("lengthscales{d}"), join_semis(&h.lengthscales));
        }
        out
    }

    /// Reads a record previously written by [`RunRecord::write_files`].
    pub fn read_files(dir: &Path, stem: &str) -> Result<RunRecord> {
        let meta_path = dir.join(format!("{stem}_meta.csv"));
        let meta = Meta::read(&meta_path)?;
        let d_x: usize = meta.get(&meta_path, "d_x")?;
        let d_u: usize = meta.get(&meta_path, "d_u")?;
        let d = d_x + d_u;

        let main_path = dir.join(format!("{stem}.csv"));
        let rows = read_csv(&main_path, 1 + d_x + d_u + d_x + 1 + d + 1)?;
        let mut transitions = Vec::with_capacity(rows.len());
        for row in rows {
            let f = FieldReader::new(&main_path, row);
            transitions.push(Transition {
                t: f.field(0)?,
                x: f.vector(1, d_x)?,
                u: f.vector(1 + d_x, d_u)?,
                x_next: f.vector(1 + d_x + d_u, d_x)?,
                is_replan: f.field::<u8>(1 + 2 * d_x + d_u)? != 0,
                xi_star: AugmentedState::new(f.vector(2 + 2 * d_x + d_u, d)?),
                mi_score: f.field(2 + 2 * d_x + d_u + d)?,
            });
        }

        let replans_path = dir.join(format!("{stem}_replans.csv"));
        let rows = read_csv(&replans_path, 2 + d + 1 + d_x + 1 + 3 * d_x)?;
        let mut replans = Vec::with_capacity(rows.len());
        for row in rows {
            let f = FieldReader::new(&replans_path, row);
            let mut hypers = Vec::with_capacity(d_x);
            for k in 0..d_x {
                let base = 4 + d + d_x + 3 * k;
                hypers.push(HyperSnapshot {
                    signal_variance: f.field(base)?,
                    noise_variance: f.field(base + 1)?,
                    lengthscales: f.semis(base + 2)?,
                });
            }
            replans.push(ReplanEvent {
                t: f.field(0)?,
                n_data: f.field(1)?,
                xi_star: AugmentedState::new(f.vector(2, d)?),
                mi_star: f.field(2 + d)?,
                per_dim: (0..d_x)
                    .map(|i| f.field(3 + d + i))
                    .collect::<Result<Vec<f64>>>()?,
                mi_current: f.field(3 + d + d_x)?,
                hypers,
            });
        }

        let cp_path = dir.join(format!("{stem}_checkpoints.csv"));
        let rows = read_csv(&cp_path, 3)?;
        let mut checkpoints = Vec::with_capacity(rows.len());
        for row in rows {
            let f = FieldReader::new(&cp_path, row);
            checkpoints.push(Checkpoint {
                checkpoint: f.field(0)?,
                t: f.field(1)?,
                rmse: f.field(2)?,
            });
        }

        let mut final_hypers = Vec::with_capacity(d_x);
        for dim in 0..d_x {
            final_hypers.push(HyperSnapshot {
                signal_variance: meta.get(&meta_path, &format!("signal_variance{dim}"))?,
                noise_variance: meta.get(&meta_path, &format!("noise_variance{dim}"))?,
                lengthscales: parse_semis(
                    &meta.get::<String>(&meta_path, &format!("lengthscales{dim}"))?,
                )
                .map_err(|m| Error::parse(path_str(&meta_path), m))?,
            });
        }

        let record = RunRecord {
            system: meta.get(&meta_path, "system")?,
            strategy: meta
                .get::<String>(&meta_path, "strategy")?
                .parse()
                .map_err(|e: Error| Error::parse(path_str(&meta_path), e.to_string()))?,
            seed: meta.get(&meta_path, "seed")?,
            master_seed: meta.get(&meta_path, "master_seed")?,
            run_index: meta.get(&meta_path, "run_index")?,
            n_rmse_samples: meta.get(&meta_path, "n_rmse_samples")?,
            noise_std: meta.get(&meta_path, "noise_std")?,
            d_x,
            d_u,
            total_steps: meta.get(&meta_path, "total_steps")?,
            checkpoint_every: meta.get(&meta_path, "checkpoint_every")?,
            transitions,
            replans,
            checkpoints,
            final_hypers,
            timings: Timings {
                total_s: meta.get(&meta_path, "total_s")?,
                plan_s: meta.get(&meta_path, "plan_s")?,
                train_s: meta.get(&meta_path, "train_s")?,
            },
            success: meta.get(&meta_path, "success")?,
        };
        Ok(record)
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn join_semis(vals: &[f64]) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_semis(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(';')
        .map(|p| p.parse::<f64>().map_err(|e| format!("bad float {p:?}: {e}")))
        .collect()
}

/// Reads a header-led CSV, checking every row has `cols` fields.
fn read_csv(path: &Path, cols: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path_str(path), "empty file"))?;
    if header.split(',').count() != cols {
        return Err(Error::parse(
            path_str(path),
            format!(
                "expected {cols} columns, header has {}",
                header.split(',').count()
            ),
        ));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if fields.len() != cols {
            return Err(Error::parse(
                path_str(path),
                format!("line {}: expected {cols} fields, got {}", lineno + 2, fields.len()),
            ));
        }
        rows.push(fields);
    }
    Ok(rows)
}

struct FieldReader<'a> {
    path: &'a Path,
    row: Vec<String>,
}

impl<'a> FieldReader<'a> {
    fn new(path: &'a Path, row: Vec<String>) -> Self {
        FieldReader { path, row }
    }

    fn field<T: FromStr>(&self, idx: usize) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.row[idx]
            .parse::<T>()
            .map_err(|e| Error::parse(path_str(self.path), format!("field {idx}: {e}")))
    }

    fn vector(&self, start: usize, len: usize) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(len);
        for i in 0..len {
            v[i] = self.field(start + i)?;
        }
        Ok(v)
    }

    fn semis(&self, idx: usize) -> Result<Vec<f64>> {
        parse_semis(&self.row[idx]).map_err(|m| Error::parse(path_str(self.path), m))
    }
}

struct Meta {
    pairs: Vec<(String, String)>,
}

impl Meta {
    fn read(path: &Path) -> Result<Meta> {
        let rows = read_csv(path, 2)?;
        Ok(Meta {
            pairs: rows
                .into_iter()
                .map(|mut r| (std::mem::take(&mut r[0]), std::mem::take(&mut r[1])))
                .collect(),
        })
    }

    fn get<T: FromStr>(&self, path: &Path, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self
            .pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::parse(path_str(path), format!("missing key {key:?}")))?;
        raw.parse::<T>()
            .map_err(|e| Error::parse(path_str(path), format!("key {key:?}: {e}")))
    }
}
