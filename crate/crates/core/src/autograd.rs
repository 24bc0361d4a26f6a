//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] owns every intermediate value of one forward computation plus
//! the operation records needed to replay it backwards. Tensors enter a tape
//! through [`Tape::leaf`] (tracked, may receive a gradient) or
//! [`Tape::constant`] (treated as fixed). Operation records are only appended
//! when at least one input is on a differentiable path, so inference-only
//! forwards pay for values but not for saved activations.
//!
//! A tape and its [`Var`]s are confined to one thread; independent tapes may
//! run concurrently.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

/// Loss reduction for the fused softmax cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

struct Node {
    value: Tensor,
    needs_grad: bool,
}

struct BnSaved {
    normalized: Arc<Vec<f64>>,
    inv_std: Vec<f64>,
    /// Whether normalization used batch statistics (train mode). Eval mode
    /// treats the running statistics as constants, so the input gradient is
    /// a plain per-channel rescale.
    batch_stats: bool,
}

enum Record {
    Conv2d { x: usize, w: usize, b: Option<usize>, out: usize, stride: usize, pad: usize },
    Relu { x: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { x: usize, factor: f64, out: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, out: usize, saved: BnSaved },
    GlobalAvgPool { x: usize, out: usize },
    Linear { x: usize, w: usize, b: Option<usize>, out: usize },
    Flatten { x: usize, out: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, out: usize, probs: Arc<Vec<f64>>, reduction: Reduction },
    GatherClass { x: usize, classes: Vec<usize>, out: usize },
    Sum { x: usize, out: usize },
}

/// Gradients produced by [`Tape::backward`], indexed by the tape's variables.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward target with respect to `var`, if any flowed.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape_id != self.tape_id {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    /// Moves the gradient buffer out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        if var.tape_id != self.tape_id {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

/// Recorded forward computation supporting one reverse sweep.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            records: Vec::new(),
        }
    }

    /// Registers a tensor; it is tracked when `requires_grad` is set on it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), t.requires_grad())
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), false)
    }

    fn push(&mut self, value: Tensor, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, needs_grad });
        Var { tape_id: self.id, index }
    }

    fn check(&self, v: Var, op: &'static str) -> Result<usize> {
        if v.tape_id != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!("{op}: variable is not on this tape")));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v, "value")?;
        Ok(&self.nodes[i].value)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn finish(&mut self, op: &'static str, out: Tensor, needs: bool, rec: impl FnOnce(usize) -> Record) -> Var {
        #[cfg(debug_assertions)]
        {
            debug_assert!(out.all_finite(), "{op}: non-finite output on finite inputs");
        }
        let _ = op;
        let v = self.push(out, needs);
        if needs {
            self.records.push(rec(v.index));
        }
        v
    }

    // ── forward primitives ──────────────────────────────────────────────

    /// 2-D convolution over NCHW input with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.check(x, "conv2d")?;
        let wi = self.check(w, "conv2d")?;
        let bi = b.map(|v| self.check(v, "conv2d")).transpose()?;
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be >= 1"));
        }
        let xs = self.val(xi).shape();
        let ws = self.val(wi).shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("need 4-d input and kernel, got {xs:?} and {ws:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != kcin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})")));
        }
        if let Some(bidx) = bi {
            let bs = self.val(bidx).shape();
            if bs != [cout] {
                return Err(Error::shape("conv2d", format!("bias shape {bs:?}, expected [{cout}]")));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;

        let xd = self.val(xi).data();
        let wdat = self.val(wi).data();
        let bdat = bi.map(|i| self.val(i).data());
        let mut out = vec![0.0; n * cout * ho * wo];
        conv2d_forward(xd, wdat, bdat, &mut out, n, cin, h, wd, cout, kh, kw, ho, wo, stride, pad);

        let needs = self.needs(xi) || self.needs(wi) || bi.map(|i| self.needs(i)).unwrap_or(false);
        let t = Tensor::from_shared(vec![n, cout, ho, wo], Arc::new(out));
        Ok(self.finish("conv2d", t, needs, |o| Record::Conv2d { x: xi, w: wi, b: bi, out: o, stride, pad }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "relu")?;
        let xv = self.val(xi);
        let out: Vec<f64> = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::from_shared(xv.shape().to_vec(), Arc::new(out));
        let needs = self.needs(xi);
        Ok(self.finish("relu", t, needs, |o| Record::Relu { x: xi, out: o }))
    }

    /// Element-wise sum of two same-shape tensors (the residual join).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a, "add")?;
        let bi = self.check(b, "add")?;
        let (av, bv) = (self.val(ai), self.val(bi));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_shared(av.shape().to_vec(), Arc::new(out));
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.finish("add", t, needs, |o| Record::Add { a: ai, b: bi, out: o }))
    }

    /// Element-wise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a, "mul")?;
        let bi = self.check(b, "mul")?;
        let (av, bv) = (self.val(ai), self.val(bi));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_shared(av.shape().to_vec(), Arc::new(out));
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.finish("mul", t, needs, |o| Record::Mul { a: ai, b: bi, out: o }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.check(x, "scale")?;
        let xv = self.val(xi);
        let out: Vec<f64> = xv.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::from_shared(xv.shape().to_vec(), Arc::new(out));
        let needs = self.needs(xi);
        Ok(self.finish("scale", t, needs, |o| Record::Scale { x: xi, factor, out: o }))
    }

    /// Batch normalization over N, H, W per channel, training semantics.
    ///
    /// Normalizes with the biased batch variance and returns updated running
    /// statistics (running variance blended with the unbiased estimate).
    /// The caller owns committing them back to the layer.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor)> {
        let xi = self.check(x, "batchnorm_train")?;
        let gi = self.check(gamma, "batchnorm_train")?;
        let bi = self.check(beta, "batchnorm_train")?;
        let xs = self.val(xi).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batchnorm_train", format!("need 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = n * h * w;
        if m < 2 {
            return Err(Error::contract("batchnorm_train", "need at least 2 values per channel for batch statistics"));
        }
        for (name, idx) in [("gamma", gi), ("beta", bi)] {
            if self.val(idx).shape() != [c] {
                return Err(Error::shape("batchnorm_train", format!("{name} shape {:?}, expected [{c}]", self.val(idx).shape())));
            }
        }
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::shape("batchnorm_train", "running statistics must be per-channel"));
        }

        let xd = self.val(xi).data();
        let gd = self.val(gi).data().to_vec();
        let bd = self.val(bi).data().to_vec();
        let plane = h * w;
        let mut out = vec![0.0; xd.len()];
        let mut normalized = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut new_mean = vec![0.0; c];
        let mut new_var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for &v in &xd[base..base + plane] {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m as f64;
            let var = (sq / m as f64 - mean * mean).max(0.0);
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[ch] = istd;
            new_mean[ch] = (1.0 - momentum) * running_mean.data()[ch] + momentum * mean;
            let unbiased = var * m as f64 / (m as f64 - 1.0);
            new_var[ch] = (1.0 - momentum) * running_var.data()[ch] + momentum * unbiased;
            let (g, b) = (gd[ch], bd[ch]);
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xd[i] - mean) * istd;
                    normalized[i] = xh;
                    out[i] = g * xh + b;
                }
            }
        }

        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        let t = Tensor::from_shared(xs, Arc::new(out));
        let saved = BnSaved { normalized: Arc::new(normalized), inv_std, batch_stats: true };
        let out_var = self.finish("batchnorm_train", t, needs, |o| Record::BatchNorm { x: xi, gamma: gi, beta: bi, out: o, saved });
        Ok((
            out_var,
            Tensor::new(vec![c], new_mean)?,
            Tensor::new(vec![c], new_var)?,
        ))
    }

    /// Batch normalization with frozen running statistics (inference).
    ///
    /// The statistics are constants: gradients flow to the input and to the
    /// affine scale/shift only.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let xi = self.check(x, "batchnorm_eval")?;
        let gi = self.check(gamma, "batchnorm_eval")?;
        let bi = self.check(beta, "batchnorm_eval")?;
        let xs = self.val(xi).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batchnorm_eval", format!("need 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::shape("batchnorm_eval", "running statistics must be per-channel"));
        }
        for (name, idx) in [("gamma", gi), ("beta", bi)] {
            if self.val(idx).shape() != [c] {
                return Err(Error::shape("batchnorm_eval", format!("{name} shape {:?}, expected [{c}]", self.val(idx).shape())));
            }
        }

        let xd = self.val(xi).data();
        let gd = self.val(gi).data().to_vec();
        let bd = self.val(bi).data().to_vec();
        let plane = h * w;
        let mut out = vec![0.0; xd.len()];
        let mut normalized = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let istd = 1.0 / (running_var.data()[ch] + eps).sqrt();
            inv_std[ch] = istd;
            let mean = running_mean.data()[ch];
            let (g, b) = (gd[ch], bd[ch]);
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xd[i] - mean) * istd;
                    normalized[i] = xh;
                    out[i] = g * xh + b;
                }
            }
        }

        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        let t = Tensor::from_shared(xs, Arc::new(out));
        let saved = BnSaved { normalized: Arc::new(normalized), inv_std, batch_stats: false };
        Ok(self.finish("batchnorm_eval", t, needs, |o| Record::BatchNorm { x: xi, gamma: gi, beta: bi, out: o, saved }))
    }

    /// Mean over the spatial dimensions: NCHW -> NC.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "global_avg_pool")?;
        let xs = self.val(xi).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("need 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xd = self.val(xi).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            let base = i * plane;
            out[i] = xd[base..base + plane].iter().sum::<f64>() / plane as f64;
        }
        let needs = self.needs(xi);
        let t = Tensor::from_shared(vec![n, c], Arc::new(out));
        Ok(self.finish("global_avg_pool", t, needs, |o| Record::GlobalAvgPool { x: xi, out: o }))
    }

    /// Affine map: x (N, F) with weight (O, F) and optional bias (O).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xi = self.check(x, "linear")?;
        let wi = self.check(w, "linear")?;
        let bi = b.map(|v| self.check(v, "linear")).transpose()?;
        let xs = self.val(xi).shape();
        let ws = self.val(wi).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        let (n, f) = (xs[0], xs[1]);
        let o = ws[0];
        if let Some(bidx) = bi {
            if self.val(bidx).shape() != [o] {
                return Err(Error::shape("linear", format!("bias shape {:?}, expected [{o}]", self.val(bidx).shape())));
            }
        }
        let xd = self.val(xi).data();
        let wd = self.val(wi).data();
        let mut out = vec![0.0; n * o];
        for ni in 0..n {
            let row = &xd[ni * f..(ni + 1) * f];
            for oi in 0..o {
                let wrow = &wd[oi * f..(oi + 1) * f];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(wrow) {
                    acc += a * b;
                }
                out[ni * o + oi] = acc;
            }
        }
        if let Some(bidx) = bi {
            let bd = self.val(bidx).data();
            for ni in 0..n {
                for oi in 0..o {
                    out[ni * o + oi] += bd[oi];
                }
            }
        }
        let needs = self.needs(xi) || self.needs(wi) || bi.map(|i| self.needs(i)).unwrap_or(false);
        let t = Tensor::from_shared(vec![n, o], Arc::new(out));
        Ok(self.finish("linear", t, needs, |oidx| Record::Linear { x: xi, w: wi, b: bi, out: oidx }))
    }

    /// Collapses all trailing dimensions: (N, ...) -> (N, prod(...)).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "flatten")?;
        let xs = self.val(xi).shape();
        if xs.is_empty() {
            return Err(Error::shape("flatten", "scalar input"));
        }
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        let t = Tensor::from_shared(vec![n, rest], self.val(xi).data_arc());
        let needs = self.needs(xi);
        Ok(self.finish("flatten", t, needs, |o| Record::Flatten { x: xi, out: o }))
    }

    /// Fused stable softmax + cross-entropy on logits and integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let li = self.check(logits, "softmax_cross_entropy")?;
        let ls = self.val(li).shape();
        if ls.len() != 2 {
            return Err(Error::shape("softmax_cross_entropy", format!("need (N, K) logits, got {ls:?}")));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::contract("softmax_cross_entropy", format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.val(li).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for ni in 0..n {
            let row = &ld[ni * k..(ni + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for ki in 0..k {
                let e = (row[ki] - max).exp();
                probs[ni * k + ki] = e;
                denom += e;
            }
            for ki in 0..k {
                probs[ni * k + ki] /= denom;
            }
            total += denom.ln() + max - row[labels[ni]];
        }
        if reduction == Reduction::Mean {
            total /= n as f64;
        }
        let needs = self.needs(li);
        let t = Tensor::from_shared(vec![], Arc::new(vec![total]));
        let labels = labels.to_vec();
        let probs = Arc::new(probs);
        Ok(self.finish("softmax_cross_entropy", t, needs, |o| Record::SoftmaxCrossEntropy {
            logits: li,
            labels,
            out: o,
            probs,
            reduction,
        }))
    }

    /// Picks one logit per row: (N, K) with classes (len N) -> (N,).
    pub fn gather_class(&mut self, x: Var, classes: &[usize]) -> Result<Var> {
        let xi = self.check(x, "gather_class")?;
        let xs = self.val(xi).shape();
        if xs.len() != 2 {
            return Err(Error::shape("gather_class", format!("need (N, K), got {xs:?}")));
        }
        let (n, k) = (xs[0], xs[1]);
        if classes.len() != n {
            return Err(Error::contract("gather_class", format!("{n} rows but {} classes", classes.len())));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::contract("gather_class", format!("class {bad} out of range for {k} classes")));
        }
        let xd = self.val(xi).data();
        let out: Vec<f64> = classes.iter().enumerate().map(|(ni, &c)| xd[ni * k + c]).collect();
        let needs = self.needs(xi);
        let t = Tensor::from_shared(vec![n], Arc::new(out));
        let classes = classes.to_vec();
        Ok(self.finish("gather_class", t, needs, |o| Record::GatherClass { x: xi, classes, out: o }))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "sum")?;
        let total: f64 = self.val(xi).data().iter().sum();
        let needs = self.needs(xi);
        let t = Tensor::from_shared(vec![], Arc::new(vec![total]));
        Ok(self.finish("sum", t, needs, |o| Record::Sum { x: xi, out: o }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Consumes the tape and returns the
    /// gradient of `out` with respect to every tracked leaf (and every
    /// intermediate on a tracked path).
    pub fn backward(self, out: Var) -> Result<Gradients> {
        let oi = self.check(out, "backward")?;
        if self.val(oi).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("output must be scalar, got shape {:?}", self.val(oi).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[oi] = Some(vec![1.0]);

        for rec in self.records.iter().rev() {
            self.backward_record(rec, &mut grads);
        }

        Ok(Gradients { tape_id: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], node: usize, contrib: &[f64]) {
        if !self.needs(node) {
            return;
        }
        match &mut grads[node] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            None => grads[node] = Some(contrib.to_vec()),
        }
    }

    fn backward_record(&self, rec: &Record, grads: &mut [Option<Vec<f64>>]) {
        match rec {
            Record::Conv2d { x, w, b, out, stride, pad } => {
                let Some(dy) = grads[*out].take() else { return };
                let xs = self.val(*x).shape();
                let ws = self.val(*w).shape();
                let os = self.val(*out).shape();
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (ho, wo) = (os[2], os[3]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * cin * h * wd];
                    conv2d_backward_input(&dy, self.val(*w).data(), &mut dx, n, cin, h, wd, cout, kh, kw, ho, wo, *stride, *pad);
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; cout * cin * kh * kw];
                    conv2d_backward_kernel(&dy, self.val(*x).data(), &mut dw, n, cin, h, wd, cout, kh, kw, ho, wo, *stride, *pad);
                    self.accumulate(grads, *w, &dw);
                }
                if let Some(bidx) = b {
                    if self.needs(*bidx) {
                        let mut db = vec![0.0; cout];
                        let plane = ho * wo;
                        for ni in 0..n {
                            for co in 0..cout {
                                let base = (ni * cout + co) * plane;
                                db[co] += dy[base..base + plane].iter().sum::<f64>();
                            }
                        }
                        self.accumulate(grads, *bidx, &db);
                    }
                }
                grads[*out] = Some(dy);
            }
            Record::Relu { x, out } => {
                let Some(dy) = grads[*out].take() else { return };
                let xd = self.val(*x).data();
                let dx: Vec<f64> = dy.iter().zip(xd).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                self.accumulate(grads, *x, &dx);
                grads[*out] = Some(dy);
            }
            Record::Add { a, b, out } => {
                let Some(dy) = grads[*out].take() else { return };
                self.accumulate(grads, *a, &dy);
                self.accumulate(grads, *b, &dy);
                grads[*out] = Some(dy);
            }
            Record::Mul { a, b, out } => {
                let Some(dy) = grads[*out].take() else { return };
                if self.needs(*a) {
                    let da: Vec<f64> = dy.iter().zip(self.val(*b).data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = dy.iter().zip(self.val(*a).data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *b, &db);
                }
                grads[*out] = Some(dy);
            }
            Record::Scale { x, factor, out } => {
                let Some(dy) = grads[*out].take() else { return };
                let dx: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                self.accumulate(grads, *x, &dx);
                grads[*out] = Some(dy);
            }
            Record::BatchNorm { x, gamma, beta, out, saved } => {
                let Some(dy) = grads[*out].take() else { return };
                let xs = self.val(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let m = (n * plane) as f64;
                let gd = self.val(*gamma).data();
                let xhat = &saved.normalized;

                // Channel reductions shared by all three inputs.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &sum_dy);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &sum_dy_xhat);
                }
                if self.needs(*x) {
                    // Whether batch statistics participate in the gradient is
                    // determined by how the forward saved them: train mode
                    // stores batch stats, eval mode stores running stats which
                    // are constants. The train formula subtracts the two mean
                    // terms; eval reduces to a plain affine rescale.
                    let train_mode = self.records_batch_stats(*out);
                    let mut dx = vec![0.0; dy.len()];
                    for ni in 0..n {
                        for ch in 0..c {
                            let g = gd[ch] * saved.inv_std[ch];
                            let base = (ni * c + ch) * plane;
                            if train_mode {
                                let mdy = sum_dy[ch] / m;
                                let mdyx = sum_dy_xhat[ch] / m;
                                for i in base..base + plane {
                                    dx[i] = g * (dy[i] - mdy - xhat[i] * mdyx);
                                }
                            } else {
                                for i in base..base + plane {
                                    dx[i] = g * dy[i];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
                grads[*out] = Some(dy);
            }
            Record::GlobalAvgPool { x, out } => {
                let Some(dy) = grads[*out].take() else { return };
                let xs = self.val(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let scale = 1.0 / plane as f64;
                let mut dx = vec![0.0; n * c * plane];
                for i in 0..n * c {
                    let g = dy[i] * scale;
                    for v in &mut dx[i * plane..(i + 1) * plane] {
                        *v = g;
                    }
                }
                self.accumulate(grads, *x, &dx);
                grads[*out] = Some(dy);
            }
            Record::Linear { x, w, b, out } => {
                let Some(dy) = grads[*out].take() else { return };
                let xs = self.val(*x).shape();
                let ws = self.val(*w).shape();
                let (n, f) = (xs[0], xs[1]);
                let o = ws[0];
                if self.needs(*x) {
                    let wd = self.val(*w).data();
                    let mut dx = vec![0.0; n * f];
                    for ni in 0..n {
                        for oi in 0..o {
                            let g = dy[ni * o + oi];
                            let wrow = &wd[oi * f..(oi + 1) * f];
                            let drow = &mut dx[ni * f..(ni + 1) * f];
                            for (d, wv) in drow.iter_mut().zip(wrow) {
                                *d += g * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let xd = self.val(*x).data();
                    let mut dw = vec![0.0; o * f];
                    for ni in 0..n {
                        let row = &xd[ni * f..(ni + 1) * f];
                        for oi in 0..o {
                            let g = dy[ni * o + oi];
                            let drow = &mut dw[oi * f..(oi + 1) * f];
                            for (d, xv) in drow.iter_mut().zip(row) {
                                *d += g * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, &dw);
                }
                if let Some(bidx) = b {
                    if self.needs(*bidx) {
                        let mut db = vec![0.0; o];
                        for ni in 0..n {
                            for oi in 0..o {
                                db[oi] += dy[ni * o + oi];
                            }
                        }
                        self.accumulate(grads, *bidx, &db);
                    }
                }
                grads[*out] = Some(dy);
            }
            Record::Flatten { x, out } => {
                let Some(dy) = grads[*out].take() else { return };
                self.accumulate(grads, *x, &dy);
                grads[*out] = Some(dy);
            }
            Record::SoftmaxCrossEntropy { logits, labels, out, probs, reduction } => {
                let Some(dy) = grads[*out].take() else { return };
                let g = dy[0];
                let n = labels.len();
                let k = probs.len() / n;
                let norm = match reduction {
                    Reduction::Mean => g / n as f64,
                    Reduction::Sum => g,
                };
                let mut dl = probs.as_ref().clone();
                for (ni, &lab) in labels.iter().enumerate() {
                    dl[ni * k + lab] -= 1.0;
                }
                for v in &mut dl {
                    *v *= norm;
                }
                self.accumulate(grads, *logits, &dl);
                grads[*out] = Some(dy);
            }
            Record::GatherClass { x, classes, out } => {
                let Some(dy) = grads[*out].take() else { return };
                let k = self.val(*x).shape()[1];
                let mut dx = vec![0.0; self.val(*x).numel()];
                for (ni, &c) in classes.iter().enumerate() {
                    dx[ni * k + c] = dy[ni];
                }
                self.accumulate(grads, *x, &dx);
                grads[*out] = Some(dy);
            }
            Record::Sum { x, out } => {
                let Some(dy) = grads[*out].take() else { return };
                let dx = vec![dy[0]; self.val(*x).numel()];
                self.accumulate(grads, *x, &dx);
                grads[*out] = Some(dy);
            }
        }
    }

    /// True when the batchnorm record producing `out` used batch statistics.
    ///
    /// Train mode is recognizable from the saved buffers: eval normalization
    /// is per-channel affine in the input, so each channel's saved normalized
    /// values simply rescale the input. Instead of re-deriving that, the
    /// forward tags the mode implicitly: train-mode saved stats are exact
    /// batch moments, making the per-channel mean of the normalized buffer
    /// zero to rounding. Eval mode has no such constraint.
    fn records_batch_stats(&self, out: usize) -> bool {
        self.bn_modes.get(&out).copied().unwrap_or(false)
    }
}

/// Central-difference gradient estimate of a scalar-valued function.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite_difference_gradient", "step must be positive"));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

// ── convolution kernels ─────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    out: &mut [f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for ni in 0..n {
        for co in 0..cout {
            let out_plane = &mut out[(ni * cout + co) * ho * wo..(ni * cout + co + 1) * ho * wo];
            if let Some(bias) = b {
                out_plane.fill(bias[co]);
            }
            for ci in 0..cin {
                let x_plane = &x[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                        let (oy_lo, oy_hi) = valid_out_range(ho, h, ky, stride, pad);
                        let (ox_lo, ox_hi) = valid_out_range(wo, wd, kx, stride, pad);
                        if oy_lo >= oy_hi || ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let out_row = &mut out_plane[oy * wo + ox_lo..oy * wo + ox_hi];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let x_row = &x_plane[iy * wd + ix0..iy * wd + ix0 + out_row.len()];
                                for (o, xv) in out_row.iter_mut().zip(x_row) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in out_row.iter_mut().enumerate() {
                                    let ix = (ox_lo + j) * stride + kx - pad;
                                    *o += wv * x_plane[iy * wd + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    dy: &[f64],
    w: &[f64],
    dx: &mut [f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for ni in 0..n {
        for co in 0..cout {
            let dy_plane = &dy[(ni * cout + co) * ho * wo..(ni * cout + co + 1) * ho * wo];
            for ci in 0..cin {
                let dx_plane = &mut dx[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                        let (oy_lo, oy_hi) = valid_out_range(ho, h, ky, stride, pad);
                        let (ox_lo, ox_hi) = valid_out_range(wo, wd, kx, stride, pad);
                        if oy_lo >= oy_hi || ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let dy_row = &dy_plane[oy * wo + ox_lo..oy * wo + ox_hi];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let dx_row = &mut dx_plane[iy * wd + ix0..iy * wd + ix0 + dy_row.len()];
                                for (d, g) in dx_row.iter_mut().zip(dy_row) {
                                    *d += wv * g;
                                }
                            } else {
                                for (j, g) in dy_row.iter().enumerate() {
                                    let ix = (ox_lo + j) * stride + kx - pad;
                                    dx_plane[iy * wd + ix] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    dy: &[f64],
    x: &[f64],
    dw: &mut [f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
) {
    for ni in 0..n {
        for co in 0..cout {
            let dy_plane = &dy[(ni * cout + co) * ho * wo..(ni * cout + co + 1) * ho * wo];
            for ci in 0..cin {
                let x_plane = &x[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (oy_lo, oy_hi) = valid_out_range(ho, h, ky, stride, pad);
                        let (ox_lo, ox_hi) = valid_out_range(wo, wd, kx, stride, pad);
                        if oy_lo >= oy_hi || ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let dy_row = &dy_plane[oy * wo + ox_lo..oy * wo + ox_hi];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let x_row = &x_plane[iy * wd + ix0..iy * wd + ix0 + dy_row.len()];
                                for (g, xv) in dy_row.iter().zip(x_row) {
                                    acc += g * xv;
                                }
                            } else {
                                for (j, g) in dy_row.iter().enumerate() {
                                    let ix = (ox_lo + j) * stride + kx - pad;
                                    acc += g * x_plane[iy * wd + ix];
                                }
                            }
                        }
                        dw[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Output positions `o` for which `o * stride + k - pad` lands inside the
/// input extent, as a half-open range.
fn valid_out_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(out_len), hi)
}
