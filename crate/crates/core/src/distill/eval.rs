use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::block_loss_value;
use super::train::next_token_targets;
use crate::data::{AssignMode, MixtureSampler, MixtureSpec};
use crate::model::{forward_with_taps, Model};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fraction of positions where teacher and student top-1 coincide.
    pub agreement: f64,
    pub teacher_ppl: f64,
    pub student_ppl: f64,
    /// Mean per-position KL(teacher ‖ student) at τ = 1.
    pub kd: f64,
    pub positions: u64,
    pub sequences: u64,
}

/// Running sums over batches; the result does not depend on how the
/// sequences are split into batches, up to float summation order.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    matches: u64,
    positions: u64,
    sequences: u64,
    teacher_nll: f64,
    student_nll: f64,
    targets: u64,
    kd: f64,
}

fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl EvalAccumulator {
    pub fn add<T: Scalar>(&mut self, seqs: &[&[u32]], teacher: &Tensor<T>, student: &Tensor<T>) -> Result<()> {
        if teacher.shape() != student.shape() {
            return Err(Error::dim(format!("logits {:?} vs {:?}", teacher.shape(), student.shape())));
        }
        let targets = next_token_targets(seqs);
        if targets.len() != teacher.rows() {
            return Err(Error::dim("one logits row per token expected"));
        }
        for (i, t) in targets.iter().enumerate() {
            let (zt, zs) = (teacher.row(i), student.row(i));
            self.matches += u64::from(argmax(zt) == argmax(zs));
            let (lt, ls) = (log_softmax(zt), log_softmax(zs));
            self.kd += lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
            if let Some(t) = *t {
                self.teacher_nll -= lt[t];
                self.student_nll -= ls[t];
                self.targets += 1;
            }
        }
        self.positions += targets.len() as u64;
        self.sequences += seqs.len() as u64;
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.positions == 0 || self.targets == 0 {
            return Err(Error::contract("nothing was evaluated"));
        }
        let n = self.targets as f64;
        Ok(EvalReport {
            agreement: self.matches as f64 / self.positions as f64,
            teacher_ppl: (self.teacher_nll / n).exp(),
            student_ppl: (self.student_nll / n).exp(),
            kd: self.kd / self.positions as f64,
            positions: self.positions,
            sequences: self.sequences,
        })
    }
}

const HELDOUT_STREAM: u64 = 0x4e1d_0000_0000;

/// Stream of held-out sequences, disjoint from every training stream.
pub fn heldout_sequences(mixture: &MixtureSpec, vocab: usize, n: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut s = MixtureSampler::new(mixture.clone(), vocab, seed ^ HELDOUT_STREAM, AssignMode::Stratified)?;
    Ok(s.sample_batch(n, seq_len)?.seqs)
}

/// Batched streaming evaluation of `student` against `teacher`.
pub fn evaluate<T: Scalar>(teacher: &Model<T>, student: &Model<T>, seqs: &[Vec<u32>], batch: usize) -> Result<EvalReport> {
    if teacher.spec.vocab != student.spec.vocab {
        return Err(Error::contract("teacher and student vocabularies differ"));
    }
    let mut acc = EvalAccumulator::default();
    for chunk in seqs.chunks(batch.max(1)) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        acc.add(&refs, &teacher.logits(&refs)?, &student.logits(&refs)?)?;
    }
    acc.finish()
}

/// Top-1 agreement over all positions in one forward pass.
pub fn agreement<T: Scalar>(teacher: &Model<T>, student: &Model<T>, seqs: &[&[u32]]) -> Result<f64> {
    let (zt, zs) = (teacher.logits(seqs)?, student.logits(seqs)?);
    let n = zt.rows();
    if n == 0 {
        return Err(Error::contract("no positions"));
    }
    let hits = (0..n).filter(|&i| argmax(zt.row(i)) == argmax(zs.row(i))).count();
    Ok(hits as f64 / n as f64)
}

/// Teacher-forced block losses of the student's edited layers.
pub fn block_losses<T: Scalar>(
    teacher: &Model<T>,
    student: &Model<T>,
    layers: &[usize],
    seqs: &[&[u32]],
    eps: f64,
) -> Result<BTreeMap<usize, f64>> {
    let taps = forward_with_taps(teacher, seqs, layers)?;
    let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    layers
        .iter()
        .map(|&l| {
            let tap = &taps.layers[&l];
            let mut g = Graph::new();
            let h = g.constant(tap.h_in.clone());
            let st = student.attention_branch(&mut g, l, h, &lens, None, &|_| false, &mut Vec::new())?;
            Ok((l, block_loss_value(g.value(st.u), &tap.u, eps)?))
        })
        .collect()
}
