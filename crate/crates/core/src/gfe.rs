//! Gloss feature enhancement: forced-alignment proposals as per-step
//! supervision for an auxiliary head on the first-level gloss features.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::ctc;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Probability floor applied to the GFE cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

pub const PROPOSAL_MAGIC: &[u8; 4] = b"GFA1";

/// Fraction of non-blank steps in a proposal.
pub fn balance_ratio(proposal: &[usize], blank: usize) -> f64 {
    if proposal.is_empty() {
        return 0.0;
    }
    let non_blank = proposal.iter().filter(|&&c| c != blank).count();
    non_blank as f64 / proposal.len() as f64
}

/// `(g_j, target_j)` supervision pairs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GfePairBatch<T> {
    pub sample_id: u32,
    pub proposal_epoch: u32,
    /// `(k, f_g)` first-level gloss features, row `j` pairs with `targets[j]`.
    pub features: Tensor<T>,
    pub targets: Vec<usize>,
}

impl<T: Real> GfePairBatch<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Pair each row of `g` with the matching step of `proposal`.
pub fn build_pairs<T: Real>(
    sample_id: u32,
    proposal_epoch: u32,
    g: &Tensor<T>,
    proposal: &[usize],
) -> Result<GfePairBatch<T>> {
    if g.rank() != 2 || g.shape()[0] != proposal.len() {
        return Err(Error::dim(format!(
            "proposal of length {} cannot pair with features {:?}",
            proposal.len(),
            g.shape()
        )));
    }
    Ok(GfePairBatch { sample_id, proposal_epoch, features: g.clone(), targets: proposal.to_vec() })
}

/// Forced alignment of `labels` against a `(k, u)` log-probability map.
pub fn propose(log_probs: &[f64], k: usize, u: usize, labels: &[usize]) -> Result<Vec<usize>> {
    ctc::forced_align(log_probs, k, u, labels, u - 1)
}

/// Per-step weights: `br` on blank targets, 1 elsewhere.
pub fn step_weights(targets: &[usize], blank: usize, br: f64) -> Vec<f64> {
    targets.iter().map(|&c| if c == blank { br } else { 1.0 }).collect()
}

/// Balance-weighted cross-entropy of the GFE head's `(k, u)` log-probabilities
/// against the proposal targets, averaged over the `k` steps.
pub fn gfe_loss<T: Real>(tape: &mut Tape<T>, gfe_log_probs: Var, targets: &[usize], br: f64) -> Result<Var> {
    let u = tape.shape(gfe_log_probs)[1];
    let weights: Vec<T> = step_weights(targets, u - 1, br).into_iter().map(T::of).collect();
    tape.weighted_nll(gfe_log_probs, targets, &weights, PROB_FLOOR)
}

/// Components of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_gfe: Option<f64>,
    pub l_reg: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `l_ctc + lambda2 * l_gfe + lambda1 * sum ||W||^2` over `params`.
/// Returns the differentiable total and its breakdown.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    l_ctc: Var,
    l_gfe: Option<Var>,
    params: &[Var],
    lambda1: f64,
    lambda2: f64,
) -> Result<(Var, LossBreakdown)> {
    let mut reg: Option<Var> = None;
    for &p in params {
        let sq = tape.sum_squares(p)?;
        reg = Some(match reg {
            Some(r) => tape.add(r, sq)?,
            None => sq,
        });
    }
    let mut total = l_ctc;
    if let Some(g) = l_gfe {
        let w = tape.scale(g, T::of(lambda2))?;
        total = tape.add(total, w)?;
    }
    let l_reg = match reg {
        Some(r) => {
            let v = tape.value(r).data()[0].as_f64();
            let w = tape.scale(r, T::of(lambda1))?;
            total = tape.add(total, w)?;
            v
        }
        None => 0.0,
    };
    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    let breakdown = LossBreakdown {
        l_ctc: scalar(l_ctc),
        l_gfe: l_gfe.map(scalar),
        l_reg,
        total: scalar(total),
        lambda1,
        lambda2,
    };
    Ok((total, breakdown))
}

/// Stored alignment proposal for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Proposal {
    /// Epoch at which the proposal was generated.
    pub epoch: u32,
    pub path: Vec<usize>,
}

/// Proposals keyed by sample id.
///
/// File layout (little-endian): magic `GFA1`, `u32` entry count, then per
/// entry `u32` sample id, `u32` epoch stamp, `u32` path length and the path
/// as `u16` class indices, in ascending sample id order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProposalCache {
    entries: BTreeMap<u32, Proposal>,
}

impl ProposalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sample_id: u32, proposal: Proposal) {
        self.entries.insert(sample_id, proposal);
    }

    pub fn get(&self, sample_id: u32) -> Option<&Proposal> {
        self.entries.get(&sample_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &Proposal)> {
        self.entries.iter()
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PROPOSAL_MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, p) in &self.entries {
            buf.extend_from_slice(&id.to_le_bytes());
            buf.extend_from_slice(&p.epoch.to_le_bytes());
            buf.extend_from_slice(&(p.path.len() as u32).to_le_bytes());
            for &c in &p.path {
                let c = u16::try_from(c).map_err(|_| Error::Usage(format!("class {c} does not fit u16")))?;
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R, path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if pos + n > buf.len() {
                return Err(Error::format(path, pos as u64, format!("truncated while reading {what}")));
            }
            pos += n;
            Ok(&buf[pos - n..pos])
        };
        if take(4, "magic")? != PROPOSAL_MAGIC {
            return Err(Error::format(path, 0, "bad magic, expected GFA1"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let count = u32_at(take(4, "count")?);
        let mut cache = ProposalCache::new();
        for _ in 0..count {
            let id = u32_at(take(4, "sample id")?);
            let epoch = u32_at(take(4, "epoch")?);
            let len = u32_at(take(4, "length")?) as usize;
            let raw = take(len * 2, "path")?;
            let path = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).collect();
            cache.insert(id, Proposal { epoch, path });
        }
        if pos != buf.len() {
            return Err(Error::format(path, pos as u64, "trailing bytes"));
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut &bytes[..], path)
    }
}
