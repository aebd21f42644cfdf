//! Per-task learner state, written after every task so a run can resume.
//!
//! ```text
//! b"VCLS"  magic
//! u8       format version
//! u8       kind
//! u64      tasks completed
//! ...      kind-specific payload
//! ```
//!
//! Models are embedded as length-prefixed model files; tensor lists as a
//! count followed by `(rank, extents, values)` triples. Everything is
//! little-endian and stores raw f64 bits.

use std::io::{Read, Write};
use std::path::Path;

use crate::baselines::{RegularizedLearner, RegularizedMethod, RegularizerState};
use crate::bayes::codec::{read_f64s, read_u32, read_u64, read_u8, write_f64s};
use crate::bayes::{read_posterior, write_posterior};
use crate::error::{Error, Result};
use crate::models::{
    read_discriminative, read_generative, read_point_net, write_discriminative, write_generative, write_point_net,
    BayesLinearRegression, DiscriminativeModel, GenerativeModel, PointNet,
};
use crate::oracle::DiagonalGaussian;
use crate::tensor::Tensor;
use crate::trainer::{Coreset, CoresetEntry, CoresetPolicy};

pub const STATE_FORMAT_VERSION: u8 = 1;
const MAGIC: &[u8; 4] = b"VCLS";

/// What a method carries from one task to the next.
#[derive(Clone, Debug, PartialEq)]
pub enum MethodState {
    Vcl {
        q: DiscriminativeModel,
    },
    VclCoreset {
        q: DiscriminativeModel,
        coreset: Coreset,
    },
    CoresetOnly {
        coreset: Coreset,
    },
    Point {
        net: PointNet,
        learner: RegularizedLearner,
    },
    GenVcl {
        gen: GenerativeModel,
    },
    GenRegularized {
        gen: GenerativeModel,
        learner: RegularizedLearner,
    },
    Patterns {
        q: BayesLinearRegression,
        oracle: DiagonalGaussian,
    },
}

impl MethodState {
    fn kind(&self) -> u8 {
        match self {
            MethodState::Vcl { .. } => 1,
            MethodState::VclCoreset { .. } => 2,
            MethodState::CoresetOnly { .. } => 3,
            MethodState::Point { .. } => 4,
            MethodState::GenVcl { .. } => 5,
            MethodState::GenRegularized { .. } => 6,
            MethodState::Patterns { .. } => 7,
        }
    }
}

/// A state file's contents.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub tasks_done: usize,
    pub method: MethodState,
}

fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    Ok(w.write_all(&[v])?)
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    usize::try_from(read_u64(r)?).map_err(|_| Error::Format("length overflow".into()))
}

fn write_blob<W: Write>(w: &mut W, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_u64(w, buf.len() as u64)?;
    Ok(w.write_all(&buf)?)
}

fn read_blob<R: Read, T>(r: &mut R, f: impl FnOnce(&mut &[u8]) -> Result<T>) -> Result<T> {
    let n = read_len(r)?;
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Truncated {
            what: "embedded model".into(),
            expected: n,
            actual: buf.len(),
        });
    }
    let mut slice = buf.as_slice();
    let out = f(&mut slice)?;
    if !slice.is_empty() {
        return Err(Error::Format("trailing bytes after embedded model".into()));
    }
    Ok(out)
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    write_f64s(w, t.data())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r)?;
    if rank > 8 {
        return Err(Error::Format(format!("tensor rank {rank} too large")));
    }
    let shape = (0..rank).map(|_| read_len(r)).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
    Tensor::new(shape, read_f64s(r, n)?)
}

fn write_tensors<W: Write>(w: &mut W, ts: &[Tensor]) -> Result<()> {
    write_u64(w, ts.len() as u64)?;
    ts.iter().try_for_each(|t| write_tensor(w, t))
}

fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let n = read_len(r)?;
    (0..n).map(|_| read_tensor(r)).collect()
}

fn write_vec<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    write_u64(w, xs.len() as u64)?;
    write_f64s(w, xs)
}

fn read_vec<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = read_len(r)?;
    read_f64s(r, n)
}

fn write_coreset<W: Write>(w: &mut W, c: &Coreset) -> Result<()> {
    write_u8(w, matches!(c.policy, CoresetPolicy::KCenter) as u8)?;
    write_u64(w, c.per_task_quota as u64)?;
    write_u64(w, c.entries.len() as u64)?;
    for e in &c.entries {
        write_u64(w, e.task_id as u64)?;
        write_u64(w, e.index as u64)?;
        write_u64(w, e.label as u64)?;
        write_vec(w, &e.input)?;
    }
    Ok(())
}

fn read_coreset<R: Read>(r: &mut R) -> Result<Coreset> {
    let policy = match read_u8(r)? {
        0 => CoresetPolicy::Random,
        1 => CoresetPolicy::KCenter,
        p => return Err(Error::Format(format!("unknown coreset policy {p}"))),
    };
    let quota = read_len(r)?;
    let n = read_len(r)?;
    let entries = (0..n)
        .map(|_| {
            Ok(CoresetEntry {
                task_id: read_len(r)?,
                index: read_len(r)?,
                label: read_len(r)?,
                input: read_vec(r)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Coreset {
        entries,
        policy,
        per_task_quota: quota,
    })
}

fn write_learner<W: Write>(w: &mut W, l: &RegularizedLearner) -> Result<()> {
    let method = serde_json::to_vec(&l.method)?;
    write_u64(w, method.len() as u64)?;
    w.write_all(&method)?;
    let s = &l.state;
    write_u64(w, s.anchors.len() as u64)?;
    for (a, p) in s.anchors.iter().zip(&s.precisions) {
        write_tensors(w, a)?;
        write_tensors(w, p)?;
    }
    write_vec(w, &s.lambdas)?;
    write_tensors(w, &s.si_omega)?;
    write_tensors(w, &s.si_importance)?;
    write_tensors(w, &l.lp_precision)?;
    write_u64(w, l.tasks_seen as u64)
}

fn read_learner<R: Read>(r: &mut R) -> Result<RegularizedLearner> {
    let n = read_len(r)?;
    let mut json = Vec::new();
    r.take(n as u64).read_to_end(&mut json)?;
    let method: RegularizedMethod = serde_json::from_slice(&json)?;
    let k = read_len(r)?;
    let (mut anchors, mut precisions) = (Vec::with_capacity(k), Vec::with_capacity(k));
    for _ in 0..k {
        anchors.push(read_tensors(r)?);
        precisions.push(read_tensors(r)?);
    }
    let lambdas = read_vec(r)?;
    if lambdas.len() != k {
        return Err(Error::Format(format!("{} lambdas for {k} anchors", lambdas.len())));
    }
    let state = RegularizerState {
        anchors,
        precisions,
        lambdas,
        si_omega: read_tensors(r)?,
        si_importance: read_tensors(r)?,
    };
    Ok(RegularizedLearner {
        method,
        state,
        lp_precision: read_tensors(r)?,
        tasks_seen: read_len(r)?,
    })
}

pub fn write_state<W: Write>(w: &mut W, s: &RunState) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u8(w, STATE_FORMAT_VERSION)?;
    write_u8(w, s.method.kind())?;
    write_u64(w, s.tasks_done as u64)?;
    match &s.method {
        MethodState::Vcl { q } => write_blob(w, |b| write_discriminative(b, q)),
        MethodState::VclCoreset { q, coreset } => {
            write_blob(w, |b| write_discriminative(b, q))?;
            write_coreset(w, coreset)
        }
        MethodState::CoresetOnly { coreset } => write_coreset(w, coreset),
        MethodState::Point { net, learner } => {
            write_blob(w, |b| write_point_net(b, net))?;
            write_learner(w, learner)
        }
        MethodState::GenVcl { gen } => write_blob(w, |b| write_generative(b, gen)),
        MethodState::GenRegularized { gen, learner } => {
            write_blob(w, |b| write_generative(b, gen))?;
            write_learner(w, learner)
        }
        MethodState::Patterns { q, oracle } => {
            write_posterior(w, &q.posterior)?;
            write_f64s(w, &[q.noise_sd])?;
            write_vec(w, &oracle.mean)?;
            write_vec(w, &oracle.precision)
        }
    }
}

pub fn read_state<R: Read>(r: &mut R) -> Result<RunState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("state file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a run state file".into()));
    }
    let version = read_u8(r)?;
    if version != STATE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "state version {version}, expected {STATE_FORMAT_VERSION}"
        )));
    }
    let kind = read_u8(r)?;
    let tasks_done = read_len(r)?;
    let method = match kind {
        1 => MethodState::Vcl {
            q: read_blob(r, |b| read_discriminative(b))?,
        },
        2 => MethodState::VclCoreset {
            q: read_blob(r, |b| read_discriminative(b))?,
            coreset: read_coreset(r)?,
        },
        3 => MethodState::CoresetOnly {
            coreset: read_coreset(r)?,
        },
        4 => MethodState::Point {
            net: read_blob(r, |b| read_point_net(b))?,
            learner: read_learner(r)?,
        },
        5 => MethodState::GenVcl {
            gen: read_blob(r, |b| read_generative(b))?,
        },
        6 => MethodState::GenRegularized {
            gen: read_blob(r, |b| read_generative(b))?,
            learner: read_learner(r)?,
        },
        7 => {
            let posterior = read_posterior(r)?;
            let noise_sd = read_f64s(r, 1)?[0];
            let mean = read_vec(r)?;
            let precision = read_vec(r)?;
            MethodState::Patterns {
                q: BayesLinearRegression { posterior, noise_sd },
                oracle: DiagonalGaussian::new(mean, precision)?,
            }
        }
        k => return Err(Error::Format(format!("unknown state kind {k}"))),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes in state file".into()));
    }
    Ok(RunState { tasks_done, method })
}

/// Writes to a sibling temporary file and renames it into place, so a
/// killed process never leaves a half-written state behind.
pub fn save_state(path: &Path, s: &RunState) -> Result<()> {
    let tmp = path.with_extension("state.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_state(&mut f, s)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<RunState> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_state(&mut f)
}
