//! Layer-level operations with hand-written backward rules.

use super::tape::{acc, axpy, sigmoid, Node, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::stager::crf;

pub(crate) struct Conv1dSaved {
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

pub(crate) struct Conv2dSaved {
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: (usize, usize),
    pad: (usize, usize),
}

pub(crate) struct LstmCellSaved {
    x: usize,
    h: usize,
    c: usize,
    w_ih: usize,
    w_hh: usize,
    b: usize,
    /// Post-activation gates `[i, f, g, o]`.
    gates: Vec<f64>,
}

pub(crate) struct LstmSeqSaved {
    x: usize,
    w_ih: usize,
    w_hh: usize,
    b: usize,
    /// Post-activation gates per step, `[n, 4h]`.
    gates: Vec<f64>,
    /// Cell states `c_0 .. c_n` (`c_0 = 0`), `[n + 1, h]`.
    cells: Vec<f64>,
}

pub(crate) struct RoiAlignSaved {
    x: usize,
    /// For every output (roi, bin): the `(index, weight)` taps it averaged.
    taps: Vec<Vec<(usize, f64)>>,
    bins: usize,
}

pub(crate) struct CrossEntropySaved {
    x: usize,
    targets: Vec<usize>,
    weights: Vec<f64>,
    probs: Vec<f64>,
    norm: f64,
}

pub(crate) struct BceSaved {
    x: usize,
    targets: Vec<f64>,
    weights: Vec<f64>,
    norm: f64,
}

pub(crate) struct CrfSaved {
    y: usize,
    a: usize,
    path: Vec<usize>,
    /// `d loss / d y`, filled in the forward pass.
    dy: Vec<f64>,
    /// `d loss / d A`.
    da: Vec<f64>,
}

impl Tape {
    /// `x [n, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (n, din, dout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {dout} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let xr = &tx.data()[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &tw.data()[o * din..(o + 1) * din];
                out[r * dout + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                axpy(row, bv, 1.0);
            }
        }
        let v = Tensor::new(vec![n, dout], out)?;
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        Ok(self.push(
            v,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &parents,
        ))
    }

    /// 1-D convolution. `x [batch, c_in, len]`, `w [c_out, c_in, k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 3 || tw.ndim() != 3 || tx.shape()[1] != tw.shape()[1] || stride == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, k) = (tw.shape()[0], tw.shape()[2]);
        if len + 2 * pad < k {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {k} longer than padded input {}", len + 2 * pad),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape("conv1d", format!("bias {:?}", self.shape(b))));
            }
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; bsz * cout * lout];
        let xd = tx.data();
        let wd = tw.data();
        for bb in 0..bsz {
            for co in 0..cout {
                let orow = &mut out[(bb * cout + co) * lout..(bb * cout + co + 1) * lout];
                for ci in 0..cin {
                    let xrow = &xd[(bb * cin + ci) * len..(bb * cin + ci + 1) * len];
                    for kk in 0..k {
                        let wv = wd[(co * cin + ci) * k + kk];
                        for (t, o) in orow.iter_mut().enumerate() {
                            let pos = t * stride + kk;
                            if pos >= pad && pos - pad < len {
                                *o += wv * xrow[pos - pad];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for bb in 0..bsz {
                for co in 0..cout {
                    out[(bb * cout + co) * lout..(bb * cout + co + 1) * lout]
                        .iter_mut()
                        .for_each(|o| *o += bv[co]);
                }
            }
        }
        let v = Tensor::new(vec![bsz, cout, lout], out)?;
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        Ok(self.push(
            v,
            Op::Conv1d(Conv1dSaved {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            }),
            &parents,
        ))
    }

    /// 2-D convolution of a single image. `x [c_in, h, w]`, `w [c_out, c_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 3
            || tw.ndim() != 4
            || tx.shape()[0] != tw.shape()[1]
            || stride.0 == 0
            || stride.1 == 0
        {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (cin, h, wd_) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        if h + 2 * pad.0 < kh || wd_ + 2 * pad.1 < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd_}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (wd_ + 2 * pad.1 - kw) / stride.1 + 1;
        let mut out = vec![0.0; cout * ho * wo];
        let xd = tx.data();
        let wdat = tw.data();
        for co in 0..cout {
            for ci in 0..cin {
                for a in 0..kh {
                    for bb in 0..kw {
                        let wv = wdat[((co * cin + ci) * kh + a) * kw + bb];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = oy * stride.0 + a;
                            if iy < pad.0 || iy - pad.0 >= h {
                                continue;
                            }
                            let xrow = &xd[(ci * h + iy - pad.0) * wd_..(ci * h + iy - pad.0 + 1) * wd_];
                            let orow = &mut out[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = ox * stride.1 + bb;
                                if ix >= pad.1 && ix - pad.1 < wd_ {
                                    *o += wv * xrow[ix - pad.1];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for co in 0..cout {
                out[co * ho * wo..(co + 1) * ho * wo]
                    .iter_mut()
                    .for_each(|o| *o += bv[co]);
            }
        }
        let v = Tensor::new(vec![cout, ho, wo], out)?;
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        Ok(self.push(
            v,
            Op::Conv2d(Conv2dSaved {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            }),
            &parents,
        ))
    }

    /// Non-overlapping average pooling along the last axis of `[batch, c, len]`.
    pub fn avg_pool1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 || k == 0 || t.shape()[2] % k != 0 {
            return Err(Error::shape(
                "avg_pool1d",
                format!("{:?} with window {k}", t.shape()),
            ));
        }
        let out: Vec<f64> = t
            .data()
            .chunks(k)
            .map(|c| c.iter().sum::<f64>() / k as f64)
            .collect();
        let shape = vec![t.shape()[0], t.shape()[1], t.shape()[2] / k];
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::AvgPool1d { x: x.0, k }, &[x.0]))
    }

    /// Non-overlapping max pooling along the last axis of `[batch, c, len]`.
    pub fn max_pool1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 || k == 0 || t.shape()[2] % k != 0 {
            return Err(Error::shape(
                "max_pool1d",
                format!("{:?} with window {k}", t.shape()),
            ));
        }
        let mut out = Vec::with_capacity(t.len() / k);
        let mut argmax = Vec::with_capacity(t.len() / k);
        for (j, c) in t.data().chunks(k).enumerate() {
            let mut best = 0;
            for (q, &v) in c.iter().enumerate() {
                if v > c[best] {
                    best = q;
                }
            }
            out.push(c[best]);
            argmax.push(j * k + best);
        }
        let shape = vec![t.shape()[0], t.shape()[1], t.shape()[2] / k];
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MaxPool1d { x: x.0, argmax }, &[x.0]))
    }

    /// One LSTM step with gate order `[i, f, g, o]`.
    ///
    /// Returns `[2h]`: the new hidden state followed by the new cell state.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
    ) -> Result<Var> {
        let hd = self.value(h).len();
        let fd = self.value(x).len();
        if self.shape(w_ih) != [4 * hd, fd]
            || self.shape(w_hh) != [4 * hd, hd]
            || self.value(b).len() != 4 * hd
            || self.value(c).len() != hd
        {
            return Err(Error::shape(
                "lstm_cell",
                format!(
                    "x {:?}, h {:?}, c {:?}, w_ih {:?}, w_hh {:?}, b {:?}",
                    self.shape(x),
                    self.shape(h),
                    self.shape(c),
                    self.shape(w_ih),
                    self.shape(w_hh),
                    self.shape(b)
                ),
            ));
        }
        let gates = lstm_gates(
            self.value(x).data(),
            self.value(h).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
            hd,
        );
        let cv = self.value(c).data();
        let mut out = vec![0.0; 2 * hd];
        for j in 0..hd {
            let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
            let cn = f * cv[j] + i * g;
            out[hd + j] = cn;
            out[j] = o * cn.tanh();
        }
        let v = Tensor::from_vec(out);
        Ok(self.push(
            v,
            Op::LstmCell(LstmCellSaved {
                x: x.0,
                h: h.0,
                c: c.0,
                w_ih: w_ih.0,
                w_hh: w_hh.0,
                b: b.0,
                gates,
            }),
            &[x.0, h.0, c.0, w_ih.0, w_hh.0, b.0],
        ))
    }

    /// Unrolled LSTM over `x [n, f]` from zero initial state; returns hidden
    /// states `[n, h]`.
    pub fn lstm_sequence(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 || self.value(w_hh).ndim() != 2 {
            return Err(Error::shape("lstm_sequence", format!("x {:?}", tx.shape())));
        }
        let (n, fd) = (tx.shape()[0], tx.shape()[1]);
        let hd = self.shape(w_hh)[1];
        if self.shape(w_ih) != [4 * hd, fd]
            || self.shape(w_hh) != [4 * hd, hd]
            || self.value(b).len() != 4 * hd
        {
            return Err(Error::shape(
                "lstm_sequence",
                format!(
                    "x {:?}, w_ih {:?}, w_hh {:?}, b {:?}",
                    tx.shape(),
                    self.shape(w_ih),
                    self.shape(w_hh),
                    self.shape(b)
                ),
            ));
        }
        let (wih, whh, bv) = (
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
        );
        let mut hs = vec![0.0; n * hd];
        let mut cells = vec![0.0; (n + 1) * hd];
        let mut all_gates = Vec::with_capacity(n * 4 * hd);
        let mut h_prev = vec![0.0; hd];
        for t in 0..n {
            let gates = lstm_gates(&tx.data()[t * fd..(t + 1) * fd], &h_prev, wih, whh, bv, hd);
            for j in 0..hd {
                let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
                let cn = f * cells[t * hd + j] + i * g;
                cells[(t + 1) * hd + j] = cn;
                let hn = o * cn.tanh();
                hs[t * hd + j] = hn;
                h_prev[j] = hn;
            }
            all_gates.extend_from_slice(&gates);
        }
        let v = Tensor::new(vec![n, hd], hs)?;
        Ok(self.push(
            v,
            Op::LstmSeq(LstmSeqSaved {
                x: x.0,
                w_ih: w_ih.0,
                w_hh: w_hh.0,
                b: b.0,
                gates: all_gates,
                cells,
            }),
            &[x.0, w_ih.0, w_hh.0, b.0],
        ))
    }

    /// 1-D RoIAlign over `feat [c, t]`.
    ///
    /// Each roi is `(start, end)` in feature-index coordinates, where index
    /// `j` holds the feature value at coordinate `j`. The roi is split into
    /// `bins` equal bins; each bin averages two linearly interpolated samples
    /// placed at the bin's quarter points. Sample positions are clipped to
    /// the feature extent. Output is `[rois, c * bins]`, channel-major.
    pub fn roi_align_1d(&mut self, feat: Var, rois: &[(f64, f64)], bins: usize) -> Result<Var> {
        let t = self.value(feat);
        if t.ndim() != 2 || t.shape()[1] == 0 || bins == 0 {
            return Err(Error::shape(
                "roi_align_1d",
                format!("feature {:?}, {bins} bins", t.shape()),
            ));
        }
        let (c, len) = (t.shape()[0], t.shape()[1]);
        const SAMPLES: usize = 2;
        let mut taps = Vec::with_capacity(rois.len() * bins);
        for &(s, e) in rois {
            let bw = (e - s) / bins as f64;
            for bin in 0..bins {
                let mut tap = Vec::with_capacity(2 * SAMPLES);
                for q in 0..SAMPLES {
                    let pos = s + bw * (bin as f64 + (q as f64 + 0.5) / SAMPLES as f64);
                    let pos = pos.clamp(0.0, (len - 1) as f64);
                    let j0 = pos.floor() as usize;
                    let j1 = (j0 + 1).min(len - 1);
                    let w1 = pos - j0 as f64;
                    tap.push((j0, (1.0 - w1) / SAMPLES as f64));
                    if w1 > 0.0 {
                        tap.push((j1, w1 / SAMPLES as f64));
                    }
                }
                taps.push(tap);
            }
        }
        let mut out = vec![0.0; rois.len() * c * bins];
        let d = t.data();
        for r in 0..rois.len() {
            for ch in 0..c {
                for bin in 0..bins {
                    out[(r * c + ch) * bins + bin] = taps[r * bins + bin]
                        .iter()
                        .map(|&(j, w)| w * d[ch * len + j])
                        .sum();
                }
            }
        }
        let v = Tensor::new(vec![rois.len(), c * bins], out)?;
        Ok(self.push(
            v,
            Op::RoiAlign1d(RoiAlignSaved {
                x: feat.0,
                taps,
                bins,
            }),
            &[feat.0],
        ))
    }

    /// Weighted softmax cross-entropy over rows of `logits [n, c]`, averaged by
    /// the total weight of the targets. Zero rows give a zero loss.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, {} targets", t.shape(), targets.len()),
            ));
        }
        let c = t.shape()[1];
        if targets.iter().any(|&k| k >= c) {
            return Err(Error::invalid("cross_entropy: target class out of range"));
        }
        let weights = match class_weights {
            Some(w) if w.len() == c => w.to_vec(),
            Some(w) => {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{} class weights for {c} classes", w.len()),
                ))
            }
            None => vec![1.0; c],
        };
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        let mut norm = 0.0;
        for (n, row) in probs.chunks_mut(c).enumerate() {
            let lse = super::tape::log_sum_exp(row);
            let k = targets[n];
            loss -= weights[k] * (row[k] - lse);
            norm += weights[k];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = if norm > 0.0 { loss / norm } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(CrossEntropySaved {
                x: logits.0,
                targets: targets.to_vec(),
                weights,
                probs,
                norm,
            }),
            &[logits.0],
        ))
    }

    /// Binary cross-entropy on logits, weighted mean over elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() || weights.is_some_and(|w| w.len() != targets.len()) {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", t.len(), targets.len()),
            ));
        }
        let weights = weights.map_or_else(|| vec![1.0; targets.len()], |w| w.to_vec());
        let mut loss = 0.0;
        let mut norm = 0.0;
        for ((&x, &y), &w) in t.data().iter().zip(targets).zip(&weights) {
            let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
            loss += w * (softplus - y * x);
            norm += w;
        }
        let loss = if norm > 0.0 { loss / norm } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(BceSaved {
                x: logits.0,
                targets: targets.to_vec(),
                weights,
                norm,
            }),
            &[logits.0],
        ))
    }

    /// Negative log-likelihood of `path` under a linear-chain CRF with
    /// emission scores `y [n, s]` and transition scores `a [s, s]`.
    pub fn crf_nll(&mut self, y: Var, a: Var, path: &[usize]) -> Result<Var> {
        let (ty, ta) = (self.value(y), self.value(a));
        if ty.ndim() != 2 || ty.shape()[0] != path.len() || path.is_empty() {
            return Err(Error::shape(
                "crf_nll",
                format!("emissions {:?}, path length {}", ty.shape(), path.len()),
            ));
        }
        let s = ty.shape()[1];
        if ta.shape() != [s, s] || path.iter().any(|&p| p >= s) {
            return Err(Error::shape(
                "crf_nll",
                format!("transitions {:?} for {s} states", ta.shape()),
            ));
        }
        let (log_z, node_marg, edge_marg) = crf::marginals(ty.data(), ta.data(), s);
        let score = crf::path_score(ty.data(), ta.data(), s, path);
        let mut dy = node_marg;
        for (n, &p) in path.iter().enumerate() {
            dy[n * s + p] -= 1.0;
        }
        let mut da = edge_marg;
        for w in path.windows(2) {
            da[w[0] * s + w[1]] -= 1.0;
        }
        Ok(self.push(
            Tensor::scalar(log_z - score),
            Op::CrfNll(CrfSaved {
                y: y.0,
                a: a.0,
                path: path.to_vec(),
                dy,
                da,
            }),
            &[y.0, a.0],
        ))
    }
}

fn lstm_gates(x: &[f64], h: &[f64], wih: &[f64], whh: &[f64], b: &[f64], hd: usize) -> Vec<f64> {
    let fd = x.len();
    let mut gates = b.to_vec();
    for (r, g) in gates.iter_mut().enumerate() {
        let wr = &wih[r * fd..(r + 1) * fd];
        *g += wr.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let ur = &whh[r * hd..(r + 1) * hd];
        *g += ur.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
    }
    for (r, g) in gates.iter_mut().enumerate() {
        *g = if (2 * hd..3 * hd).contains(&r) {
            g.tanh()
        } else {
            sigmoid(*g)
        };
    }
    gates
}

/// Backward of one LSTM step given upstream `dh`, `dc` for the new state.
/// Returns pre-activation gate gradients and `dc_prev`.
fn lstm_step_backward(gates: &[f64], c_prev: &[f64], c_new: &[f64], dh: &[f64], dc: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = dh.len();
    let mut da = vec![0.0; 4 * hd];
    let mut dc_prev = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
        let tc = c_new[j].tanh();
        let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
        da[j] = dct * g * i * (1.0 - i);
        da[hd + j] = dct * c_prev[j] * f * (1.0 - f);
        da[2 * hd + j] = dct * i * (1.0 - g * g);
        da[3 * hd + j] = dh[j] * tc * o * (1.0 - o);
        dc_prev[j] = dct * f;
    }
    (da, dc_prev)
}

pub(crate) fn linear_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    gd: &[f64],
    x: usize,
    w: usize,
    b: Option<usize>,
) {
    let (tx, tw) = (&nodes[x].value, &nodes[w].value);
    let (n, din, dout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
    if let Some(d) = acc(grads, nodes, x) {
        for r in 0..n {
            for o in 0..dout {
                let g = gd[r * dout + o];
                if g != 0.0 {
                    axpy(&mut d[r * din..(r + 1) * din], &tw.data()[o * din..(o + 1) * din], g);
                }
            }
        }
    }
    if let Some(d) = acc(grads, nodes, w) {
        for r in 0..n {
            for o in 0..dout {
                let g = gd[r * dout + o];
                if g != 0.0 {
                    axpy(&mut d[o * din..(o + 1) * din], &tx.data()[r * din..(r + 1) * din], g);
                }
            }
        }
    }
    if let Some(b) = b {
        if let Some(d) = acc(grads, nodes, b) {
            for row in gd.chunks(dout) {
                axpy(d, row, 1.0);
            }
        }
    }
}

pub(crate) fn conv1d_backward(nodes: &[Node], grads: &mut [Option<Tensor>], gd: &[f64], s: &Conv1dSaved) {
    let (tx, tw) = (&nodes[s.x].value, &nodes[s.w].value);
    let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
    let (cout, k) = (tw.shape()[0], tw.shape()[2]);
    let lout = gd.len() / (bsz * cout);
    let (stride, pad) = (s.stride, s.pad);
    if let Some(d) = acc(grads, nodes, s.x) {
        for bb in 0..bsz {
            for co in 0..cout {
                let grow = &gd[(bb * cout + co) * lout..(bb * cout + co + 1) * lout];
                for ci in 0..cin {
                    let drow = &mut d[(bb * cin + ci) * len..(bb * cin + ci + 1) * len];
                    for kk in 0..k {
                        let wv = tw.data()[(co * cin + ci) * k + kk];
                        for (t, &g) in grow.iter().enumerate() {
                            let pos = t * stride + kk;
                            if pos >= pad && pos - pad < len {
                                drow[pos - pad] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(d) = acc(grads, nodes, s.w) {
        for bb in 0..bsz {
            for co in 0..cout {
                let grow = &gd[(bb * cout + co) * lout..(bb * cout + co + 1) * lout];
                for ci in 0..cin {
                    let xrow = &tx.data()[(bb * cin + ci) * len..(bb * cin + ci + 1) * len];
                    for kk in 0..k {
                        let mut sacc = 0.0;
                        for (t, &g) in grow.iter().enumerate() {
                            let pos = t * stride + kk;
                            if pos >= pad && pos - pad < len {
                                sacc += g * xrow[pos - pad];
                            }
                        }
                        d[(co * cin + ci) * k + kk] += sacc;
                    }
                }
            }
        }
    }
    if let Some(b) = s.b {
        if let Some(d) = acc(grads, nodes, b) {
            for bb in 0..bsz {
                for co in 0..cout {
                    d[co] += gd[(bb * cout + co) * lout..(bb * cout + co + 1) * lout].iter().sum::<f64>();
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(nodes: &[Node], grads: &mut [Option<Tensor>], gd: &[f64], s: &Conv2dSaved) {
    let (tx, tw) = (&nodes[s.x].value, &nodes[s.w].value);
    let (cin, h, wdt) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
    let (cout, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
    let ho = (h + 2 * s.pad.0 - kh) / s.stride.0 + 1;
    let wo = (wdt + 2 * s.pad.1 - kw) / s.stride.1 + 1;
    let need_x = nodes[s.x].requires_grad;
    let need_w = nodes[s.w].requires_grad;
    let mut dx = if need_x { vec![0.0; tx.len()] } else { Vec::new() };
    let mut dw = if need_w { vec![0.0; tw.len()] } else { Vec::new() };
    for co in 0..cout {
        for ci in 0..cin {
            for a in 0..kh {
                for bb in 0..kw {
                    let widx = ((co * cin + ci) * kh + a) * kw + bb;
                    let wv = tw.data()[widx];
                    let mut wacc = 0.0;
                    for oy in 0..ho {
                        let iy = oy * s.stride.0 + a;
                        if iy < s.pad.0 || iy - s.pad.0 >= h {
                            continue;
                        }
                        let xbase = (ci * h + iy - s.pad.0) * wdt;
                        let grow = &gd[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
                        for (ox, &g) in grow.iter().enumerate() {
                            let ix = ox * s.stride.1 + bb;
                            if ix >= s.pad.1 && ix - s.pad.1 < wdt {
                                let xi = xbase + ix - s.pad.1;
                                if need_w {
                                    wacc += g * tx.data()[xi];
                                }
                                if need_x {
                                    dx[xi] += g * wv;
                                }
                            }
                        }
                    }
                    if need_w {
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    if let Some(d) = acc(grads, nodes, s.x) {
        axpy(d, &dx, 1.0);
    }
    if let Some(d) = acc(grads, nodes, s.w) {
        axpy(d, &dw, 1.0);
    }
    if let Some(b) = s.b {
        if let Some(d) = acc(grads, nodes, b) {
            for co in 0..cout {
                d[co] += gd[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
            }
        }
    }
}

fn accumulate_lstm_params(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    da: &[f64],
    x: &[f64],
    h: &[f64],
    ids: (usize, usize, usize),
) {
    let (w_ih, w_hh, b) = ids;
    let (fd, hd) = (x.len(), h.len());
    if let Some(d) = acc(grads, nodes, w_ih) {
        for (r, &g) in da.iter().enumerate() {
            if g != 0.0 {
                axpy(&mut d[r * fd..(r + 1) * fd], x, g);
            }
        }
    }
    if let Some(d) = acc(grads, nodes, w_hh) {
        for (r, &g) in da.iter().enumerate() {
            if g != 0.0 {
                axpy(&mut d[r * hd..(r + 1) * hd], h, g);
            }
        }
    }
    if let Some(d) = acc(grads, nodes, b) {
        axpy(d, da, 1.0);
    }
}

fn transpose_times(w: &[f64], da: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &g) in da.iter().enumerate() {
        if g != 0.0 {
            axpy(&mut out, &w[r * cols..(r + 1) * cols], g);
        }
    }
    out
}

pub(crate) fn lstm_cell_backward(nodes: &[Node], grads: &mut [Option<Tensor>], gd: &[f64], s: &LstmCellSaved) {
    let hd = gd.len() / 2;
    let c_prev = nodes[s.c].value.data();
    let mut cn = vec![0.0; hd];
    for j in 0..hd {
        cn[j] = s.gates[hd + j] * c_prev[j] + s.gates[j] * s.gates[2 * hd + j];
    }
    let (da, dc_prev) = lstm_step_backward(&s.gates, c_prev, &cn, &gd[..hd], &gd[hd..]);
    let xv = nodes[s.x].value.data().to_vec();
    let hv = nodes[s.h].value.data().to_vec();
    if let Some(d) = acc(grads, nodes, s.c) {
        axpy(d, &dc_prev, 1.0);
    }
    if nodes[s.x].requires_grad {
        let dx = transpose_times(nodes[s.w_ih].value.data(), &da, xv.len());
        if let Some(d) = acc(grads, nodes, s.x) {
            axpy(d, &dx, 1.0);
        }
    }
    if nodes[s.h].requires_grad {
        let dh = transpose_times(nodes[s.w_hh].value.data(), &da, hd);
        if let Some(d) = acc(grads, nodes, s.h) {
            axpy(d, &dh, 1.0);
        }
    }
    accumulate_lstm_params(nodes, grads, &da, &xv, &hv, (s.w_ih, s.w_hh, s.b));
}

pub(crate) fn lstm_seq_backward(nodes: &[Node], grads: &mut [Option<Tensor>], gd: &[f64], s: &LstmSeqSaved) {
    let tx = &nodes[s.x].value;
    let (n, fd) = (tx.shape()[0], tx.shape()[1]);
    let hd = nodes[s.w_hh].value.shape()[1];
    let wih = nodes[s.w_ih].value.data();
    let whh = nodes[s.w_hh].value.data();
    let mut dwih = vec![0.0; wih.len()];
    let mut dwhh = vec![0.0; whh.len()];
    let mut db = vec![0.0; 4 * hd];
    let mut dx = vec![0.0; n * fd];
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    for t in (0..n).rev() {
        let mut dh = gd[t * hd..(t + 1) * hd].to_vec();
        axpy(&mut dh, &dh_next, 1.0);
        let gates = &s.gates[t * 4 * hd..(t + 1) * 4 * hd];
        let c_prev = &s.cells[t * hd..(t + 1) * hd];
        let c_new = &s.cells[(t + 1) * hd..(t + 2) * hd];
        let (da, dc_prev) = lstm_step_backward(gates, c_prev, c_new, &dh, &dc_next);
        let xt = &tx.data()[t * fd..(t + 1) * fd];
        for (r, &g) in da.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(&mut dwih[r * fd..(r + 1) * fd], xt, g);
            axpy(&mut dx[t * fd..(t + 1) * fd], &wih[r * fd..(r + 1) * fd], g);
            if t > 0 {
                // h_{t-1} is the output of the previous step.
                let hp = prev_hidden(s, t, hd);
                axpy(&mut dwhh[r * hd..(r + 1) * hd], &hp, g);
            }
        }
        axpy(&mut db, &da, 1.0);
        dh_next = transpose_times(whh, &da, hd);
        dc_next = dc_prev;
    }
    if let Some(d) = acc(grads, nodes, s.x) {
        axpy(d, &dx, 1.0);
    }
    if let Some(d) = acc(grads, nodes, s.w_ih) {
        axpy(d, &dwih, 1.0);
    }
    if let Some(d) = acc(grads, nodes, s.w_hh) {
        axpy(d, &dwhh, 1.0);
    }
    if let Some(d) = acc(grads, nodes, s.b) {
        axpy(d, &db, 1.0);
    }
}

/// Hidden state `h_{t-1}` recomputed from saved gates and cells.
fn prev_hidden(s: &LstmSeqSaved, t: usize, hd: usize) -> Vec<f64> {
    let gates = &s.gates[(t - 1) * 4 * hd..t * 4 * hd];
    let c = &s.cells[t * hd..(t + 1) * hd];
    (0..hd).map(|j| gates[3 * hd + j] * c[j].tanh()).collect()
}

pub(crate) fn roi_align_backward(nodes: &[Node], grads: &mut [Option<Tensor>], gd: &[f64], s: &RoiAlignSaved) {
    let t = &nodes[s.x].value;
    let (c, len) = (t.shape()[0], t.shape()[1]);
    let bins = s.bins;
    let rois = s.taps.len() / bins;
    if let Some(d) = acc(grads, nodes, s.x) {
        for r in 0..rois {
            for ch in 0..c {
                for bin in 0..bins {
                    let g = gd[(r * c + ch) * bins + bin];
                    for &(j, w) in &s.taps[r * bins + bin] {
                        d[ch * len + j] += g * w;
                    }
                }
            }
        }
    }
}

pub(crate) fn cross_entropy_backward(nodes: &[Node], grads: &mut [Option<Tensor>], g: f64, s: &CrossEntropySaved) {
    if s.norm <= 0.0 {
        return;
    }
    let c = s.weights.len();
    if let Some(d) = acc(grads, nodes, s.x) {
        for (n, &k) in s.targets.iter().enumerate() {
            let scale = g * s.weights[k] / s.norm;
            for j in 0..c {
                let ind = if j == k { 1.0 } else { 0.0 };
                d[n * c + j] += scale * (s.probs[n * c + j] - ind);
            }
        }
    }
}

pub(crate) fn bce_backward(nodes: &[Node], grads: &mut [Option<Tensor>], g: f64, s: &BceSaved) {
    if s.norm <= 0.0 {
        return;
    }
    let xv = nodes[s.x].value.data();
    if let Some(d) = acc(grads, nodes, s.x) {
        for k in 0..d.len() {
            d[k] += g * s.weights[k] * (sigmoid(xv[k]) - s.targets[k]) / s.norm;
        }
    }
}

pub(crate) fn crf_backward(nodes: &[Node], grads: &mut [Option<Tensor>], g: f64, s: &CrfSaved) {
    debug_assert!(!s.path.is_empty());
    if let Some(d) = acc(grads, nodes, s.y) {
        axpy(d, &s.dy, g);
    }
    if let Some(d) = acc(grads, nodes, s.a) {
        axpy(d, &s.da, g);
    }
}
