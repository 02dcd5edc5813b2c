//! Dense tensor plumbing and the forward/backward passes of the
//! encoder-decoder network. Everything is f64 and batch-first (NCHW).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelSpec;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub(crate) struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        let base = (n * self.c + c) * hw;
        &self.data[base..base + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        let base = (n * self.c + c) * hw;
        &mut self.data[base..base + hw]
    }
}

type Range = std::ops::Range<usize>;

/// Parameter/state ranges of one conv + batch-norm block inside the arena.
#[derive(Debug, Clone)]
pub(crate) struct BlockDef {
    pub in_c: usize,
    pub out_c: usize,
    pub w: Range,
    pub b: Range,
    pub gamma: Range,
    pub beta: Range,
    pub run_mean: Range,
    pub run_var: Range,
}

/// Static layout of the network inside a flat value arena.
#[derive(Debug, Clone)]
pub(crate) struct NetDef {
    pub enc: Vec<BlockDef>,
    pub bottleneck: Option<BlockDef>,
    pub dec: Vec<BlockDef>,
    pub head_w: Range,
    pub head_b: Range,
    pub head_in_c: usize,
    /// Trainable slices of the arena, in declaration order.
    pub trainable: Vec<Range>,
    pub len: usize,
}

struct Allocator {
    len: usize,
    trainable: Vec<Range>,
}

impl Allocator {
    fn alloc(&mut self, n: usize, train: bool) -> Range {
        let r = self.len..self.len + n;
        self.len += n;
        if train {
            self.trainable.push(r.clone());
        }
        r
    }

    fn block(&mut self, in_c: usize, out_c: usize) -> BlockDef {
        BlockDef {
            in_c,
            out_c,
            w: self.alloc(out_c * in_c * 9, true),
            b: self.alloc(out_c, true),
            gamma: self.alloc(out_c, true),
            beta: self.alloc(out_c, true),
            run_mean: self.alloc(out_c, false),
            run_var: self.alloc(out_c, false),
        }
    }
}

impl NetDef {
    pub fn build(spec: &ModelSpec) -> NetDef {
        let mut a = Allocator {
            len: 0,
            trainable: Vec::new(),
        };
        let widths = &spec.widths;
        let mut enc = Vec::new();
        let mut bottleneck = None;
        let mut dec = Vec::new();
        let mut cur_c = spec.in_channels;
        if !widths.is_empty() {
            for &w in &widths[..widths.len() - 1] {
                enc.push(a.block(cur_c, w));
                cur_c = w;
            }
            let deep = *widths.last().expect("non-empty widths");
            bottleneck = Some(a.block(cur_c, deep));
            cur_c = deep;
            for s in (0..widths.len() - 1).rev() {
                let skip_c = widths[s];
                dec.push(a.block(cur_c + skip_c, skip_c));
                cur_c = skip_c;
            }
        }
        let head_in_c = cur_c;
        let head_w = a.alloc(head_in_c, true);
        let head_b = a.alloc(1, true);
        NetDef {
            enc,
            bottleneck,
            dec,
            head_w,
            head_b,
            head_in_c,
            trainable: a.trainable,
            len: a.len,
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().map(|r| r.len()).sum()
    }

    pub fn init_values(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut values = vec![0.0; self.len];
        for def in self.enc.iter().chain(&self.bottleneck).chain(&self.dec) {
            let std = (2.0 / (def.in_c * 9) as f64).sqrt();
            for v in &mut values[def.w.clone()] {
                *v = gaussian(rng) * std;
            }
            values[def.gamma.clone()].fill(1.0);
            values[def.run_var.clone()].fill(1.0);
        }
        let std = (2.0 / self.head_in_c as f64).sqrt();
        for v in &mut values[self.head_w.clone()] {
            *v = gaussian(rng) * std;
        }
        values
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the stream reproducible across rand versions.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// How a forward pass treats batch statistics and dropout.
pub(crate) enum Mode<'r> {
    Train {
        dropout_rate: f64,
        rng: Option<&'r mut ChaCha8Rng>,
        update_running: bool,
    },
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockTrace {
    pub xhat: Tensor,
    pub invstd: Vec<f64>,
    pub relu_out: Tensor,
    pub drop_mask: Option<Vec<f64>>,
    pub out: Tensor,
    pub dims: (usize, usize, usize, usize),
}

#[derive(Debug)]
pub(crate) struct Trace {
    pub input: Tensor,
    pub enc: Vec<BlockTrace>,
    pub pool_idx: Vec<Vec<u32>>,
    pub pooled: Vec<Tensor>,
    pub bottleneck: Option<BlockTrace>,
    pub dec: Vec<(Tensor, BlockTrace)>, // (concat input, block trace)
    pub probs: Tensor,
}

impl NetDef {
    /// Runs the network over a batch. In train mode batch statistics feed the
    /// batch-norm layers (and optionally the running averages); in eval mode
    /// the frozen running averages are used and dropout is off.
    pub fn forward(&self, values: &mut [f64], input: Tensor, mode: &mut Mode) -> Trace {
        let mut enc_traces = Vec::with_capacity(self.enc.len());
        let mut pool_idx = Vec::with_capacity(self.enc.len());
        let mut pooled = Vec::with_capacity(self.enc.len());
        let mut x = input.clone();
        for def in &self.enc {
            let t = block_forward(def, values, &x, mode);
            let (p, idx) = maxpool2_forward(&t.out);
            x = p.clone();
            enc_traces.push(t);
            pool_idx.push(idx);
            pooled.push(p);
        }
        let bottleneck = self.bottleneck.as_ref().map(|def| {
            let t = block_forward(def, values, &x, mode);
            x = t.out.clone();
            t
        });
        let mut dec_traces = Vec::with_capacity(self.dec.len());
        for (i, def) in self.dec.iter().enumerate() {
            let skip = &enc_traces[self.enc.len() - 1 - i].out;
            let up = upsample2_forward(&x);
            let cat = concat_channels(&up, skip);
            let t = block_forward(def, values, &cat, mode);
            x = t.out.clone();
            dec_traces.push((cat, t));
        }
        let mut probs = conv1x1_forward(
            &x,
            &values[self.head_w.clone()],
            values[self.head_b.clone()][0],
        );
        for v in &mut probs.data {
            *v = sigmoid(*v);
        }
        Trace {
            input,
            enc: enc_traces,
            pool_idx,
            pooled,
            bottleneck,
            dec: dec_traces,
            probs,
        }
    }

    /// Backpropagates `d_probs` (gradient w.r.t. the sigmoid outputs) and
    /// accumulates parameter gradients into `grads`.
    pub fn backward(&self, values: &[f64], trace: &Trace, mut d_probs: Tensor, grads: &mut [f64]) {
        for (d, &p) in d_probs.data.iter_mut().zip(&trace.probs.data) {
            *d *= p * (1.0 - p);
        }
        let head_in = trace
            .dec
            .last()
            .map(|(_, t)| &t.out)
            .or(trace.bottleneck.as_ref().map(|t| &t.out))
            .unwrap_or(&trace.input);
        let mut dx = conv1x1_backward(
            head_in,
            &values[self.head_w.clone()],
            &d_probs,
            grads,
            self.head_w.clone(),
            self.head_b.clone(),
        );

        // Decoder stage i consumes encoder stage enc_len-1-i as its skip.
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; self.enc.len()];
        for (i, def) in self.dec.iter().enumerate().rev() {
            let (cat, t) = &trace.dec[i];
            let d_cat = block_backward(def, values, cat, t, dx, grads);
            let enc_i = self.enc.len() - 1 - i;
            let skip_c = self.enc[enc_i].out_c;
            let (d_up, d_skip) = split_channels(&d_cat, d_cat.c - skip_c);
            skip_grads[enc_i] = Some(d_skip);
            dx = upsample2_backward(&d_up);
        }
        if let (Some(def), Some(t)) = (&self.bottleneck, &trace.bottleneck) {
            let x_in = trace.pooled.last().unwrap_or(&trace.input);
            dx = block_backward(def, values, x_in, t, dx, grads);
        }
        for (i, def) in self.enc.iter().enumerate().rev() {
            let mut d_pre_pool = maxpool2_backward(&dx, &trace.pool_idx[i], &trace.enc[i].out);
            if let Some(skip) = &skip_grads[i] {
                for (d, s) in d_pre_pool.data.iter_mut().zip(&skip.data) {
                    *d += s;
                }
            }
            let x_in = if i == 0 {
                &trace.input
            } else {
                &trace.pooled[i - 1]
            };
            dx = block_backward(def, values, x_in, &trace.enc[i], d_pre_pool, grads);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn block_forward(def: &BlockDef, values: &mut [f64], x: &Tensor, mode: &mut Mode) -> BlockTrace {
    let z = conv3x3_forward(x, &values[def.w.clone()], &values[def.b.clone()], def.out_c);
    let (xhat, invstd) = match mode {
        Mode::Train { update_running, .. } => bn_forward_train(&z, values, def, *update_running),
        Mode::Eval => bn_forward_eval(&z, values, def),
    };
    let dims = (z.n, z.c, z.h, z.w);
    let mut relu_out = Tensor::zeros(z.n, z.c, z.h, z.w);
    for n in 0..z.n {
        for c in 0..z.c {
            let gamma = values[def.gamma.clone()][c];
            let beta = values[def.beta.clone()][c];
            let xp = xhat.plane(n, c);
            let rp = relu_out.plane_mut(n, c);
            for (r, &xv) in rp.iter_mut().zip(xp) {
                *r = (gamma * xv + beta).max(0.0);
            }
        }
    }
    let (out, drop_mask) = match mode {
        Mode::Train {
            dropout_rate,
            rng: Some(rng),
            ..
        } if *dropout_rate > 0.0 => {
            let keep = 1.0 - *dropout_rate;
            let mut mask = vec![0.0; relu_out.data.len()];
            for m in &mut mask {
                if rng.gen::<f64>() < keep {
                    *m = 1.0 / keep;
                }
            }
            let mut out = relu_out.clone();
            for (o, m) in out.data.iter_mut().zip(&mask) {
                *o *= m;
            }
            (out, Some(mask))
        }
        _ => (relu_out.clone(), None),
    };
    BlockTrace {
        xhat,
        invstd,
        relu_out,
        drop_mask,
        out,
        dims,
    }
}

fn block_backward(
    def: &BlockDef,
    values: &[f64],
    x_in: &Tensor,
    t: &BlockTrace,
    mut d_out: Tensor,
    grads: &mut [f64],
) -> Tensor {
    if let Some(mask) = &t.drop_mask {
        for (d, m) in d_out.data.iter_mut().zip(mask) {
            *d *= m;
        }
    }
    for (d, &r) in d_out.data.iter_mut().zip(&t.relu_out.data) {
        if r <= 0.0 {
            *d = 0.0;
        }
    }
    let (n, c, h, w) = t.dims;
    let m = (n * h * w) as f64;
    let mut d_z = Tensor::zeros(n, c, h, w);
    for ch in 0..c {
        let gamma = values[def.gamma.clone()][ch];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            for (&d, &xh) in d_out.plane(ni, ch).iter().zip(t.xhat.plane(ni, ch)) {
                sum_dy += d;
                sum_dy_xhat += d * xh;
            }
        }
        grads[def.gamma.clone()][ch] += sum_dy_xhat;
        grads[def.beta.clone()][ch] += sum_dy;
        let scale = gamma * t.invstd[ch] / m;
        for ni in 0..n {
            let dp = d_out.plane(ni, ch);
            let xp = t.xhat.plane(ni, ch);
            let zp = d_z.plane_mut(ni, ch);
            for ((z, &d), &xh) in zp.iter_mut().zip(dp).zip(xp) {
                *z = scale * (m * d - sum_dy - xh * sum_dy_xhat);
            }
        }
    }
    conv3x3_backward(x_in, values, &d_z, def, grads)
}

fn bn_forward_train(
    z: &Tensor,
    values: &mut [f64],
    def: &BlockDef,
    update_running: bool,
) -> (Tensor, Vec<f64>) {
    let m = (z.n * z.h * z.w) as f64;
    let mut xhat = Tensor::zeros(z.n, z.c, z.h, z.w);
    let mut invstds = Vec::with_capacity(z.c);
    for c in 0..z.c {
        let mut mean = 0.0;
        for n in 0..z.n {
            mean += z.plane(n, c).iter().sum::<f64>();
        }
        mean /= m;
        // Corrected two-pass mean: makes constant planes exactly centered,
        // which the near-zero-variance amplification (1/sqrt(eps)) would
        // otherwise magnify across stages.
        let mut residual = 0.0;
        for n in 0..z.n {
            for &v in z.plane(n, c) {
                residual += v - mean;
            }
        }
        mean += residual / m;
        let mut var = 0.0;
        for n in 0..z.n {
            for &v in z.plane(n, c) {
                var += (v - mean) * (v - mean);
            }
        }
        var /= m;
        let invstd = 1.0 / (var + BN_EPS).sqrt();
        for n in 0..z.n {
            let zp = z.plane(n, c);
            let xp = xhat.plane_mut(n, c);
            for (x, &v) in xp.iter_mut().zip(zp) {
                *x = (v - mean) * invstd;
            }
        }
        if update_running {
            let rm = &mut values[def.run_mean.clone()][c];
            *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean;
            let rv = &mut values[def.run_var.clone()][c];
            *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var;
        }
        invstds.push(invstd);
    }
    (xhat, invstds)
}

fn bn_forward_eval(z: &Tensor, values: &[f64], def: &BlockDef) -> (Tensor, Vec<f64>) {
    let mut xhat = Tensor::zeros(z.n, z.c, z.h, z.w);
    let mut invstds = Vec::with_capacity(z.c);
    for c in 0..z.c {
        let mean = values[def.run_mean.clone()][c];
        let var = values[def.run_var.clone()][c];
        let invstd = 1.0 / (var + BN_EPS).sqrt();
        for n in 0..z.n {
            let zp = z.plane(n, c);
            let xp = xhat.plane_mut(n, c);
            for (x, &v) in xp.iter_mut().zip(zp) {
                *x = (v - mean) * invstd;
            }
        }
        invstds.push(invstd);
    }
    (xhat, invstds)
}

pub(crate) fn conv3x3_forward(input: &Tensor, w: &[f64], b: &[f64], out_c: usize) -> Tensor {
    let (n, in_c, h, wd) = (input.n, input.c, input.h, input.w);
    let mut out = Tensor::zeros(n, out_c, h, wd);
    for ni in 0..n {
        for oc in 0..out_c {
            out.plane_mut(ni, oc).fill(b[oc]);
            for ci in 0..in_c {
                let wbase = (oc * in_c + ci) * 9;
                let in_plane = input.plane(ni, ci);
                let mut kw = [0.0; 9];
                kw.copy_from_slice(&w[wbase..wbase + 9]);
                let out_plane = out.plane_mut(ni, oc);
                for ky in 0..3usize {
                    let y_off = ky as isize - 1;
                    for kx in 0..3usize {
                        let x_off = kx as isize - 1;
                        let wv = kw[ky * 3 + kx];
                        let y0 = if y_off < 0 { 1 } else { 0 };
                        let y1 = if y_off > 0 { h - 1 } else { h };
                        let x0 = if x_off < 0 { 1 } else { 0 };
                        let x1 = if x_off > 0 { wd - 1 } else { wd };
                        for y in y0..y1 {
                            let yi = (y as isize + y_off) as usize;
                            let ib = (yi * wd) as isize + x_off;
                            let orow = &mut out_plane[y * wd + x0..y * wd + x1];
                            let irow = &in_plane[(ib + x0 as isize) as usize..(ib + x1 as isize) as usize];
                            for (o, &iv) in orow.iter_mut().zip(irow) {
                                *o += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward(
    input: &Tensor,
    values: &[f64],
    d_out: &Tensor,
    def: &BlockDef,
    grads: &mut [f64],
) -> Tensor {
    let (n, in_c, out_c, h, wd) = (input.n, input.c, d_out.c, input.h, input.w);
    let w = &values[def.w.clone()];
    let mut d_in = Tensor::zeros(n, in_c, h, wd);
    let mut dw_acc = vec![0.0; out_c * in_c * 9];
    let mut db_acc = vec![0.0; out_c];
    for ni in 0..n {
        for oc in 0..out_c {
            let d_plane = d_out.plane(ni, oc);
            db_acc[oc] += d_plane.iter().sum::<f64>();
            for ci in 0..in_c {
                let wbase = (oc * in_c + ci) * 9;
                let in_plane = input.plane(ni, ci);
                let din_plane = d_in.plane_mut(ni, ci);
                for ky in 0..3usize {
                    let y_off = ky as isize - 1;
                    for kx in 0..3usize {
                        let x_off = kx as isize - 1;
                        let wv = w[wbase + ky * 3 + kx];
                        let mut dw = 0.0;
                        let y0 = if y_off < 0 { 1 } else { 0 };
                        let y1 = if y_off > 0 { h - 1 } else { h };
                        let x0 = if x_off < 0 { 1 } else { 0 };
                        let x1 = if x_off > 0 { wd - 1 } else { wd };
                        for y in y0..y1 {
                            let yi = (y as isize + y_off) as usize;
                            let ib = (yi * wd) as isize + x_off;
                            let istart = (ib + x0 as isize) as usize;
                            let iend = (ib + x1 as isize) as usize;
                            let drow = &d_plane[y * wd + x0..y * wd + x1];
                            let irow = &in_plane[istart..iend];
                            let dirow = &mut din_plane[istart..iend];
                            for ((di, &dv), &iv) in dirow.iter_mut().zip(drow).zip(irow) {
                                *di += wv * dv;
                                dw += dv * iv;
                            }
                        }
                        dw_acc[wbase + ky * 3 + kx] += dw;
                    }
                }
            }
        }
    }
    for (g, d) in grads[def.w.clone()].iter_mut().zip(&dw_acc) {
        *g += d;
    }
    for (g, d) in grads[def.b.clone()].iter_mut().zip(&db_acc) {
        *g += d;
    }
    d_in
}

fn conv1x1_forward(input: &Tensor, w: &[f64], b: f64) -> Tensor {
    let mut out = Tensor::zeros(input.n, 1, input.h, input.w);
    for n in 0..input.n {
        let op = out.plane_mut(n, 0);
        op.fill(b);
        for c in 0..input.c {
            let ip = input.plane(n, c);
            let wv = w[c];
            for (o, &iv) in op.iter_mut().zip(ip) {
                *o += wv * iv;
            }
        }
    }
    out
}

fn conv1x1_backward(
    input: &Tensor,
    w: &[f64],
    d_out: &Tensor,
    grads: &mut [f64],
    w_range: Range,
    b_range: Range,
) -> Tensor {
    let mut d_in = Tensor::zeros(input.n, input.c, input.h, input.w);
    let mut dw = vec![0.0; input.c];
    let mut db = 0.0;
    for n in 0..input.n {
        let dp = d_out.plane(n, 0);
        db += dp.iter().sum::<f64>();
        for c in 0..input.c {
            let ip = input.plane(n, c);
            let dip = d_in.plane_mut(n, c);
            let wv = w[c];
            let mut acc = 0.0;
            for ((di, &dv), &iv) in dip.iter_mut().zip(dp).zip(ip) {
                *di += wv * dv;
                acc += dv * iv;
            }
            dw[c] += acc;
        }
    }
    for (g, d) in grads[w_range].iter_mut().zip(&dw) {
        *g += d;
    }
    grads[b_range][0] += db;
    d_in
}

fn maxpool2_forward(input: &Tensor) -> (Tensor, Vec<u32>) {
    debug_assert!(input.h % 2 == 0 && input.w % 2 == 0);
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = Tensor::zeros(input.n, input.c, oh, ow);
    let mut idx = vec![0u32; input.n * input.c * oh * ow];
    let mut k = 0;
    for n in 0..input.n {
        for c in 0..input.c {
            let ip = input.plane(n, c);
            let op = out.plane_mut(n, c);
            for y in 0..oh {
                for x in 0..ow {
                    let base = 2 * y * input.w + 2 * x;
                    let cells = [base, base + 1, base + input.w, base + input.w + 1];
                    let mut best = cells[0];
                    for &cell in &cells[1..] {
                        if ip[cell] > ip[best] {
                            best = cell;
                        }
                    }
                    op[y * ow + x] = ip[best];
                    idx[k] = best as u32;
                    k += 1;
                }
            }
        }
    }
    (out, idx)
}

fn maxpool2_backward(d_out: &Tensor, idx: &[u32], pre_pool: &Tensor) -> Tensor {
    let mut d_in = Tensor::zeros(pre_pool.n, pre_pool.c, pre_pool.h, pre_pool.w);
    let mut k = 0;
    for n in 0..d_out.n {
        for c in 0..d_out.c {
            let hw = d_out.h * d_out.w;
            let dp_base = (n * d_out.c + c) * hw;
            let dip = d_in.plane_mut(n, c);
            for i in 0..hw {
                dip[idx[k] as usize] += d_out.data[dp_base + i];
                k += 1;
            }
        }
    }
    d_in
}

fn upsample2_forward(input: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(input.n, input.c, input.h * 2, input.w * 2);
    let ow = input.w * 2;
    for n in 0..input.n {
        for c in 0..input.c {
            let ip = input.plane(n, c);
            let op = out.plane_mut(n, c);
            for y in 0..input.h {
                for x in 0..input.w {
                    let v = ip[y * input.w + x];
                    let base = 2 * y * ow + 2 * x;
                    op[base] = v;
                    op[base + 1] = v;
                    op[base + ow] = v;
                    op[base + ow + 1] = v;
                }
            }
        }
    }
    out
}

fn upsample2_backward(d_out: &Tensor) -> Tensor {
    let (ih, iw) = (d_out.h / 2, d_out.w / 2);
    let mut d_in = Tensor::zeros(d_out.n, d_out.c, ih, iw);
    for n in 0..d_out.n {
        for c in 0..d_out.c {
            let dp = d_out.plane(n, c);
            let dip = d_in.plane_mut(n, c);
            for y in 0..ih {
                for x in 0..iw {
                    let base = 2 * y * d_out.w + 2 * x;
                    dip[y * iw + x] =
                        dp[base] + dp[base + 1] + dp[base + d_out.w] + dp[base + d_out.w + 1];
                }
            }
        }
    }
    d_in
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for c in 0..a.c {
            out.plane_mut(n, c).copy_from_slice(a.plane(n, c));
        }
        for c in 0..b.c {
            out.plane_mut(n, a.c + c).copy_from_slice(b.plane(n, c));
        }
    }
    out
}

fn split_channels(d: &Tensor, first_c: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(d.n, first_c, d.h, d.w);
    let mut b = Tensor::zeros(d.n, d.c - first_c, d.h, d.w);
    for n in 0..d.n {
        for c in 0..first_c {
            a.plane_mut(n, c).copy_from_slice(d.plane(n, c));
        }
        for c in 0..d.c - first_c {
            b.plane_mut(n, c).copy_from_slice(d.plane(n, first_c + c));
        }
    }
    (a, b)
}
