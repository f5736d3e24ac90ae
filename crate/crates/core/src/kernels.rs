//! Fused element-wise and row-wise ops with hand-written backward passes.
//!
//! Composing these from candle primitives builds long autograd chains that
//! dominate step time on CPU; each op here is one forward loop and one
//! backward loop. Values are computed in f64 and stored in the input dtype.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout, op: &str) -> CResult<Vec<f64>> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{op}: input must be contiguous")))?;
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => return Err(candle_core::Error::Msg(format!("{op}: only f32/f64 supported"))),
    })
}

fn store(v: Vec<f64>, like: &CpuStorage) -> CpuStorage {
    match like {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

fn row_len(l: &Layout) -> usize {
    l.dims().last().copied().unwrap_or(1).max(1)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

fn tanh_fast(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

struct Gelu;
struct GeluGrad;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = contiguous(s, l, self.name())?;
        let y = x
            .iter()
            .map(|&x| 0.5 * x * (1.0 + tanh_fast(GELU_C * (x + GELU_A * x * x * x))))
            .collect();
        Ok((store(y, s), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1, self.name())?;
        let g = contiguous(s2, l2, self.name())?;
        let d = x
            .iter()
            .zip(&g)
            .map(|(&x, &g)| {
                let th = tanh_fast(GELU_C * (x + GELU_A * x * x * x));
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
            })
            .collect();
        Ok((store(d, s1), l1.shape().clone()))
    }
}

struct Softmax;
struct SoftmaxGrad;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let mut x = contiguous(s, l, self.name())?;
        for row in x.chunks_mut(row_len(l)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok((store(x, s), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    // dx = y ⊙ (g − Σ g⊙y)
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let y = contiguous(s1, l1, self.name())?;
        let mut g = contiguous(s2, l2, self.name())?;
        let n = row_len(l1);
        for (yr, gr) in y.chunks(n).zip(g.chunks_mut(n)) {
            let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
            for (gv, &yv) in gr.iter_mut().zip(yr) {
                *gv = yv * (*gv - dot);
            }
        }
        Ok((store(g, s1), l1.shape().clone()))
    }
}

struct LayerNorm {
    eps: f64,
}

struct LayerNormGrad {
    eps: f64,
}

impl CustomOp1 for LayerNorm {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let mut x = contiguous(s, l, self.name())?;
        let n = row_len(l);
        for row in x.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        Ok((store(x, s), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(
            &grad.contiguous()?,
            &LayerNormGrad { eps: self.eps },
        )?))
    }
}

impl CustomOp2 for LayerNormGrad {
    fn name(&self) -> &'static str {
        "layer-norm-grad"
    }

    // dx = (g − mean(g) − y·mean(g⊙y)) / σ, recomputing y from x.
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1, self.name())?;
        let mut g = contiguous(s2, l2, self.name())?;
        let n = row_len(l1);
        let mut y = vec![0.0; n];
        for (xr, gr) in x.chunks(n).zip(g.chunks_mut(n)) {
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (yv, &xv) in y.iter_mut().zip(xr) {
                *yv = (xv - mean) * inv;
            }
            let g_mean = gr.iter().sum::<f64>() / n as f64;
            let gy_mean = gr.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            for (gv, &yv) in gr.iter_mut().zip(&y) {
                *gv = (*gv - g_mean - yv * gy_mean) * inv;
            }
        }
        Ok((store(g, s1), l1.shape().clone()))
    }
}

/// `x` viewed as `[groups, rows, width]` against a per-group vector `[groups, width]`.
#[derive(Debug, Clone)]
struct Groups {
    g: usize,
    n: usize,
    c: usize,
    /// Shape of the per-group operand, so its gradient comes back in kind.
    s_shape: Shape,
}

impl Groups {
    fn of(x: &Tensor, s: &Tensor, per_batch: bool) -> candle_core::Result<Self> {
        let c = x.dims().last().copied().unwrap_or(1);
        let g = if per_batch { x.dims().first().copied().unwrap_or(1) } else { 1 };
        if c == 0 || g == 0 || s.elem_count() != g * c || x.elem_count() % (g * c) != 0 {
            return Err(candle_core::Error::Msg(format!(
                "cannot broadcast {:?} against {:?}",
                s.dims(),
                x.dims()
            )));
        }
        Ok(Self { g, n: x.elem_count() / (g * c), c, s_shape: s.shape().clone() })
    }

    /// Visit `(flat index into x, flat index into s)` pairs.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for gi in 0..self.g {
            for ni in 0..self.n {
                let base = (gi * self.n + ni) * self.c;
                for ci in 0..self.c {
                    f(base + ci, gi * self.c + ci);
                }
            }
        }
    }
}

/// `Σ_rows a` or `Σ_rows a⊙b` per group → the per-group operand's shape.
struct GroupReduce(Groups);

impl CustomOp1 for GroupReduce {
    fn name(&self) -> &'static str {
        "group-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let a = contiguous(s, l, "group-sum")?;
        let mut out = vec![0.0; self.0.g * self.0.c];
        self.0.for_each(|i, j| out[j] += a[i]);
        Ok((store(out, s), self.0.s_shape.clone()))
    }
}

impl CustomOp2 for GroupReduce {
    fn name(&self) -> &'static str {
        "group-sum-product"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let a = contiguous(s1, l1, "group-sum-product")?;
        let b = contiguous(s2, l2, "group-sum-product")?;
        let mut out = vec![0.0; self.0.g * self.0.c];
        self.0.for_each(|i, j| out[j] += a[i] * b[i]);
        Ok((store(out, s1), self.0.s_shape.clone()))
    }
}

/// `a ⊙ (k + s)` with `s` broadcast per group.
struct GroupScale(Groups, f64);

impl CustomOp2 for GroupScale {
    fn name(&self) -> &'static str {
        "group-scale"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let mut a = contiguous(s1, l1, self.name())?;
        let s = contiguous(s2, l2, self.name())?;
        self.0.for_each(|i, j| a[i] *= self.1 + s[j]);
        Ok((store(a, s1), l1.shape().clone()))
    }
}

fn reduce(grad: &Tensor, other: Option<&Tensor>, gr: &Groups) -> CResult<Tensor> {
    let grad = grad.contiguous()?;
    match other {
        None => grad.apply_op1_no_bwd(&GroupReduce(gr.clone())),
        Some(o) => grad.apply_op2_no_bwd(&o.contiguous()?, &GroupReduce(gr.clone())),
    }
}

/// `x + b` with `b` broadcast along rows.
struct AddRows(Groups);

impl CustomOp2 for AddRows {
    fn name(&self) -> &'static str {
        "add-rows"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let mut x = contiguous(s1, l1, self.name())?;
        let b = contiguous(s2, l2, self.name())?;
        self.0.for_each(|i, j| x[i] += b[j]);
        Ok((store(x, s1), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad.clone()), Some(reduce(grad, None, &self.0)?)))
    }
}

/// `x ⊙ (1 + scale) + shift`, per-batch `scale` and `shift`.
struct Modulate(Groups);

impl CustomOp3 for Modulate {
    fn name(&self) -> &'static str {
        "modulate"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let mut x = contiguous(s1, l1, self.name())?;
        let scale = contiguous(s2, l2, self.name())?;
        let shift = contiguous(s3, l3, self.name())?;
        self.0.for_each(|i, j| x[i] = x[i] * (1.0 + scale[j]) + shift[j]);
        Ok((store(x, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(&scale.contiguous()?, &GroupScale(self.0.clone(), 1.0))?;
        let dscale = reduce(&grad, Some(x), &self.0)?;
        let dshift = reduce(&grad, None, &self.0)?;
        Ok((Some(dx), Some(dscale), Some(dshift)))
    }
}

/// `base + gate ⊙ h`, per-batch `gate`.
struct GatedAdd(Groups);

impl CustomOp3 for GatedAdd {
    fn name(&self) -> &'static str {
        "gated-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let mut base = contiguous(s1, l1, self.name())?;
        let h = contiguous(s2, l2, self.name())?;
        let gate = contiguous(s3, l3, self.name())?;
        self.0.for_each(|i, j| base[i] += gate[j] * h[i]);
        Ok((store(base, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        _base: &Tensor,
        h: &Tensor,
        gate: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dh = grad.apply_op2_no_bwd(&gate.contiguous()?, &GroupScale(self.0.clone(), 0.0))?;
        let dgate = reduce(&grad, Some(h), &self.0)?;
        Ok((Some(grad), Some(dh), Some(dgate)))
    }
}

fn same_dtype(a: &Tensor, b: &Tensor) -> candle_core::Result<()> {
    if a.dtype() != b.dtype() {
        return Err(candle_core::Error::Msg(format!(
            "dtype mismatch {:?} vs {:?}",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(())
}

/// `x + b` where `b` has `x`'s trailing size and repeats over all leading rows.
pub fn add_rows(x: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    check_dtype(x)?;
    same_dtype(x, b)?;
    let gr = Groups::of(x, b, false)?;
    x.contiguous()?.apply_op2(&b.contiguous()?, AddRows(gr))
}

/// `x ⊙ (1 + scale) + shift` for `x: [batch, n, c]`, `scale, shift: [batch, 1, c]`.
pub fn modulate(x: &Tensor, scale: &Tensor, shift: &Tensor) -> candle_core::Result<Tensor> {
    check_dtype(x)?;
    same_dtype(x, scale)?;
    same_dtype(x, shift)?;
    let gr = Groups::of(x, scale, true)?;
    if shift.dims() != scale.dims() {
        return Err(candle_core::Error::Msg("shift and scale shapes differ".into()));
    }
    x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, Modulate(gr))
}

/// `base + gate ⊙ h` for `base, h: [batch, n, c]`, `gate: [batch, 1, c]`.
pub fn gated_add(base: &Tensor, h: &Tensor, gate: &Tensor) -> candle_core::Result<Tensor> {
    check_dtype(base)?;
    same_dtype(base, h)?;
    same_dtype(base, gate)?;
    if base.dims() != h.dims() {
        return Err(candle_core::Error::Msg("gated_add operands differ in shape".into()));
    }
    let gr = Groups::of(base, gate, true)?;
    base.contiguous()?
        .apply_op3(&h.contiguous()?, &gate.contiguous()?, GatedAdd(gr))
}

fn check_dtype(x: &Tensor) -> candle_core::Result<()> {
    match x.dtype() {
        DType::F32 | DType::F64 => Ok(()),
        other => Err(candle_core::Error::Msg(format!("unsupported dtype {other:?}"))),
    }
}

/// `0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))`.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    check_dtype(x)?;
    x.contiguous()?.apply_op1(Gelu)
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    check_dtype(x)?;
    x.contiguous()?.apply_op1(Softmax)
}

/// Layer norm over the last axis, no affine transform.
pub fn layer_norm(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    check_dtype(x)?;
    x.contiguous()?.apply_op1(LayerNorm { eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn reference_softmax(x: &Tensor) -> Tensor {
        let e = x.broadcast_sub(&x.max_keepdim(D::Minus1).unwrap()).unwrap().exp().unwrap();
        e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap()
    }

    fn reference_ln(x: &Tensor) -> Tensor {
        let c = x.broadcast_sub(&x.mean_keepdim(D::Minus1).unwrap()).unwrap();
        let v = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        c.broadcast_div(&(v + 1e-6).unwrap().sqrt().unwrap()).unwrap()
    }

    fn reference_gelu(x: &Tensor) -> Tensor {
        let inner = (x + x.powf(3.0).unwrap().affine(GELU_A, 0.0).unwrap()).unwrap().affine(GELU_C, 0.0).unwrap();
        (x * (inner.tanh().unwrap() + 1.0).unwrap()).unwrap().affine(0.5, 0.0).unwrap()
    }

    /// Forward values and gradients of a weighted sum agree with the
    /// composed-primitive reference.
    fn compare(fused: impl Fn(&Tensor) -> Tensor, reference: impl Fn(&Tensor) -> Tensor) {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 2.0, (3, 4, 7), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 4, 7), &dev).unwrap();
        let v = Var::from_tensor(&x).unwrap();
        let run = |f: &dyn Fn(&Tensor) -> Tensor| {
            let y = f(v.as_tensor());
            let g = (&y * &w).unwrap().sum_all().unwrap().backward().unwrap();
            let gx = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            (y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), gx)
        };
        let (ya, ga) = run(&fused);
        let (yb, gb) = run(&reference);
        for (a, b) in ya.iter().zip(&yb).chain(ga.iter().zip(&gb)) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn gelu_matches_composition() {
        compare(|x| gelu(x).unwrap(), reference_gelu);
    }

    #[test]
    fn softmax_matches_composition() {
        compare(|x| softmax_last(x).unwrap(), reference_softmax);
    }

    #[test]
    fn layer_norm_matches_composition() {
        compare(|x| layer_norm(x, 1e-6).unwrap(), reference_ln);
    }

    fn grads(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Tensor]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
        let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let y = f(&ts);
        let wy = (&y * y.affine(0.3, 0.7).unwrap()).unwrap();
        let g = wy.sum_all().unwrap().backward().unwrap();
        let out = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let gs = ts
            .iter()
            .map(|t| g.get(t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .collect();
        (out, gs)
    }

    fn assert_close(a: &(Vec<f64>, Vec<Vec<f64>>), b: &(Vec<f64>, Vec<Vec<f64>>)) {
        let flat = |p: &(Vec<f64>, Vec<Vec<f64>>)| {
            let mut v = p.0.clone();
            p.1.iter().for_each(|g| v.extend(g));
            v
        };
        let (fa, fb) = (flat(a), flat(b));
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn broadcast_kernels_match_composition() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (3, 5, 4), &dev).unwrap();
        let h = Tensor::randn(0f64, 1.0, (3, 5, 4), &dev).unwrap();
        let s = Tensor::randn(0f64, 1.0, (3, 1, 4), &dev).unwrap();
        let t = Tensor::randn(0f64, 1.0, (3, 1, 4), &dev).unwrap();
        let b = Tensor::randn(0f64, 1.0, (4,), &dev).unwrap();

        let fused = grads(|v| modulate(&v[0], &v[1], &v[2]).unwrap(), &[x.clone(), s.clone(), t.clone()]);
        let refr = grads(
            |v| v[0].broadcast_mul(&(&v[1] + 1.0).unwrap()).unwrap().broadcast_add(&v[2]).unwrap(),
            &[x.clone(), s.clone(), t.clone()],
        );
        assert_close(&fused, &refr);

        let fused = grads(|v| gated_add(&v[0], &v[1], &v[2]).unwrap(), &[x.clone(), h.clone(), s.clone()]);
        let refr = grads(
            |v| (&v[0] + v[1].broadcast_mul(&v[2]).unwrap()).unwrap(),
            &[x.clone(), h.clone(), s.clone()],
        );
        assert_close(&fused, &refr);

        let fused = grads(|v| add_rows(&v[0], &v[1]).unwrap(), &[x.clone(), b.clone()]);
        let refr = grads(|v| v[0].broadcast_add(&v[1]).unwrap(), &[x.clone(), b.clone()]);
        assert_close(&fused, &refr);

        assert!(add_rows(&x, &Tensor::zeros(3, DType::F64, &dev).unwrap()).is_err());
    }

    #[test]
    fn non_contiguous_input_and_f32() {
        let x = Tensor::randn(0f32, 1.0, (4, 6), &Device::Cpu).unwrap().t().unwrap();
        let y = softmax_last(&x).unwrap();
        let sums = y.sum(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
        assert_eq!(y.dtype(), DType::F32);
    }
}
