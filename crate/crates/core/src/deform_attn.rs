//! Single-level multi-head deformable attention with an exact backward pass.
//!
//! For a query `q` and a reference point `r` in normalized `[0,1]^2`
//! coordinates, each head `h` samples its slice of the value-projected map at
//! `r * (W-1, H-1) + offset_hp` for `points` learned pixel offsets, mixes the
//! samples with per-head softmax weights, and the concatenated heads pass
//! through an output projection.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    sample_backward_into, sample_into, softmax_backward_into, softmax_into, LinearParams, ParamRng,
    Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DeformAttnParams {
    pub heads: usize,
    pub points: usize,
    /// `C -> heads * points * 2`, pixel units, `(dx, dy)` pairs.
    pub offset_proj: LinearParams,
    /// `C -> heads * points`
    pub weight_proj: LinearParams,
    pub value_proj: LinearParams,
    pub output_proj: LinearParams,
}

impl DeformAttnParams {
    pub fn new(
        heads: usize,
        points: usize,
        offset_proj: LinearParams,
        weight_proj: LinearParams,
        value_proj: LinearParams,
        output_proj: LinearParams,
    ) -> Result<Self> {
        let p = Self {
            heads,
            points,
            offset_proj,
            weight_proj,
            value_proj,
            output_proj,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.value_proj.in_dim();
        if self.heads == 0 || self.points == 0 {
            return Err(Error::InvalidArgument(
                "heads and points must be positive".into(),
            ));
        }
        if c == 0 || c % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{c} channels are not divisible by {} heads",
                self.heads
            )));
        }
        let hp = self.heads * self.points;
        let dims = [
            ("offset_proj", &self.offset_proj, 2 * hp, c),
            ("weight_proj", &self.weight_proj, hp, c),
            ("value_proj", &self.value_proj, c, c),
            ("output_proj", &self.output_proj, c, c),
        ];
        for (name, p, out, inp) in dims {
            if p.out_dim() != out || p.in_dim() != inp {
                return shape_err(format!(
                    "{name} is {}x{}, expected {out}x{inp}",
                    p.out_dim(),
                    p.in_dim()
                ));
            }
        }
        Ok(())
    }

    /// Random weight, value and output projections; offsets start at zero so
    /// every point initially samples the reference location.
    pub fn init(channels: usize, heads: usize, points: usize, rng: &mut ParamRng) -> Result<Self> {
        let hp = heads * points;
        let weight_proj = LinearParams::init(hp, channels, rng);
        let value_proj = LinearParams::init(channels, channels, rng);
        let output_proj = LinearParams::init(channels, channels, rng);
        Self::new(
            heads,
            points,
            LinearParams::zeros(2 * hp, channels),
            weight_proj,
            value_proj,
            output_proj,
        )
    }

    /// Zero offsets, uniform point weights, identity value and output
    /// projections: the layer reduces to bilinear sampling at the reference.
    pub fn identity(channels: usize, heads: usize, points: usize) -> Result<Self> {
        let hp = heads * points;
        Self::new(
            heads,
            points,
            LinearParams::zeros(2 * hp, channels),
            LinearParams::zeros(hp, channels),
            LinearParams::identity(channels),
            LinearParams::identity(channels),
        )
    }

    /// Fully random, including offsets (useful for exercising gradients).
    pub fn random(
        channels: usize,
        heads: usize,
        points: usize,
        offset_scale: f64,
        rng: &mut ParamRng,
    ) -> Result<Self> {
        let mut p = Self::init(channels, heads, points, rng)?;
        p.offset_proj = LinearParams::init(2 * heads * points, channels, rng);
        let s = offset_scale * (channels as f64).sqrt();
        p.offset_proj.weight = p.offset_proj.weight.scaled(s);
        p.offset_proj.bias = p.offset_proj.bias.scaled(s);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.value_proj.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            points: self.points,
            offset_proj: self.offset_proj.zeros_like(),
            weight_proj: self.weight_proj.zeros_like(),
            value_proj: self.value_proj.zeros_like(),
            output_proj: self.output_proj.zeros_like(),
        }
    }

    fn layers(&self) -> [&LinearParams; 4] {
        [
            &self.offset_proj,
            &self.weight_proj,
            &self.value_proj,
            &self.output_proj,
        ]
    }

    fn layers_mut(&mut self) -> [&mut LinearParams; 4] {
        [
            &mut self.offset_proj,
            &mut self.weight_proj,
            &mut self.value_proj,
            &mut self.output_proj,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in self.layers() {
            l.flatten_into(out);
        }
    }

    pub fn assign_from<'a>(&mut self, mut src: &'a [f64]) -> &'a [f64] {
        for l in self.layers_mut() {
            src = l.assign_from(src);
        }
        src
    }

    pub fn axpy(&mut self, alpha: f64, other: &DeformAttnParams) {
        for (a, b) in self.layers_mut().into_iter().zip(other.layers()) {
            a.axpy(alpha, b);
        }
    }

    /// Applies `value_proj` to every pixel of a `C x H x W` map.
    pub(crate) fn project_values(&self, value_map: &Tensor) -> Result<ProjectedValues> {
        let (c, h, w) = match value_map.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return shape_err(format!("value map must be C x H x W, got {s:?}")),
        };
        if c != self.channels() {
            return shape_err(format!(
                "value map has {c} channels, attention expects {}",
                self.channels()
            ));
        }
        let hw = h * w;
        let src = value_map.data();
        let mut data = vec![0.0; c * hw];
        let mut pix_in = vec![0.0; c];
        let mut pix_out = vec![0.0; c];
        for p in 0..hw {
            for k in 0..c {
                pix_in[k] = src[k * hw + p];
            }
            self.value_proj.apply_into(&pix_in, &mut pix_out);
            for k in 0..c {
                data[k * hw + p] = pix_out[k];
            }
        }
        Ok(ProjectedValues { data, h, w })
    }

    /// Backward of [`Self::project_values`]: accumulates `value_proj`
    /// gradients and returns the gradient with respect to the raw map.
    pub(crate) fn project_values_backward(
        &self,
        value_map: &Tensor,
        grad_projected: &[f64],
        grads: &mut DeformAttnParams,
    ) -> Tensor {
        let (c, h, w) = (
            value_map.shape()[0],
            value_map.shape()[1],
            value_map.shape()[2],
        );
        let hw = h * w;
        let src = value_map.data();
        let mut grad_map = vec![0.0; c * hw];
        let mut pix_in = vec![0.0; c];
        let mut pix_g = vec![0.0; c];
        let mut pix_gin = vec![0.0; c];
        for p in 0..hw {
            let mut any = false;
            for k in 0..c {
                pix_g[k] = grad_projected[k * hw + p];
                any |= pix_g[k] != 0.0;
            }
            if !any {
                continue;
            }
            for k in 0..c {
                pix_in[k] = src[k * hw + p];
            }
            pix_gin.iter_mut().for_each(|v| *v = 0.0);
            self.value_proj
                .backward_into(&pix_in, &pix_g, &mut grads.value_proj, &mut pix_gin);
            for k in 0..c {
                grad_map[k * hw + p] = pix_gin[k];
            }
        }
        Tensor::new(vec![c, h, w], grad_map).expect("consistent extents")
    }

    fn check_query(&self, query: &[f64], ref_point: [f64; 2]) -> Result<()> {
        if query.len() != self.channels() {
            return shape_err(format!(
                "query has {} entries, attention expects {}",
                query.len(),
                self.channels()
            ));
        }
        if !ref_point.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reference point {ref_point:?} is not finite"
            )));
        }
        Ok(())
    }

    /// Offsets, normalized weights and sampling locations for one query.
    fn plan(&self, query: &[f64], ref_point: [f64; 2], h: usize, w: usize) -> Plan {
        let hp = self.heads * self.points;
        let mut offsets = vec![0.0; 2 * hp];
        self.offset_proj.apply_into(query, &mut offsets);
        let mut logits = vec![0.0; hp];
        self.weight_proj.apply_into(query, &mut logits);
        let mut weights = vec![0.0; hp];
        for (l, a) in logits
            .chunks_exact(self.points)
            .zip(weights.chunks_exact_mut(self.points))
        {
            softmax_into(l, a);
        }
        let bx = ref_point[0] * (w as f64 - 1.0);
        let by = ref_point[1] * (h as f64 - 1.0);
        let locs = offsets
            .chunks_exact(2)
            .map(|o| (bx + o[0], by + o[1]))
            .collect();
        Plan { weights, locs }
    }

    pub(crate) fn attend_into(
        &self,
        query: &[f64],
        ref_point: [f64; 2],
        values: &ProjectedValues,
        out: &mut [f64],
    ) {
        let dh = self.head_dim();
        let plan = self.plan(query, ref_point, values.h, values.w);
        let mut heads_out = vec![0.0; self.channels()];
        let mut tmp = vec![0.0; dh];
        for hd in 0..self.heads {
            let chans = hd * dh..(hd + 1) * dh;
            for pt in 0..self.points {
                let k = hd * self.points + pt;
                let (x, y) = plan.locs[k];
                sample_into(
                    &values.data,
                    values.h,
                    values.w,
                    chans.clone(),
                    x,
                    y,
                    &mut tmp,
                );
                let a = plan.weights[k];
                for (o, s) in heads_out[chans.clone()].iter_mut().zip(&tmp) {
                    *o += a * s;
                }
            }
        }
        self.output_proj.apply_into(&heads_out, out);
    }

    /// Backward for one query. Accumulates parameter gradients (except
    /// `value_proj`) into `grads`, the projected-value gradient into
    /// `grad_values`, and adds the query gradient into `grad_query`.
    pub(crate) fn attend_backward(
        &self,
        query: &[f64],
        ref_point: [f64; 2],
        values: &ProjectedValues,
        grad_out: &[f64],
        grads: &mut DeformAttnParams,
        grad_values: &mut [f64],
        grad_query: &mut [f64],
    ) {
        let dh = self.head_dim();
        let c = self.channels();
        let hp = self.heads * self.points;
        let plan = self.plan(query, ref_point, values.h, values.w);

        let mut samples = vec![0.0; hp * dh];
        let mut heads_out = vec![0.0; c];
        for hd in 0..self.heads {
            let chans = hd * dh..(hd + 1) * dh;
            for pt in 0..self.points {
                let k = hd * self.points + pt;
                let (x, y) = plan.locs[k];
                let s = &mut samples[k * dh..(k + 1) * dh];
                sample_into(&values.data, values.h, values.w, chans.clone(), x, y, s);
                for (o, v) in heads_out[chans.clone()].iter_mut().zip(s.iter()) {
                    *o += plan.weights[k] * v;
                }
            }
        }

        let mut g_heads = vec![0.0; c];
        self.output_proj
            .backward_into(&heads_out, grad_out, &mut grads.output_proj, &mut g_heads);

        let mut g_weights = vec![0.0; hp];
        let mut g_offsets = vec![0.0; 2 * hp];
        let mut g_sample = vec![0.0; dh];
        for hd in 0..self.heads {
            let chans = hd * dh..(hd + 1) * dh;
            let gh = &g_heads[chans.clone()];
            for pt in 0..self.points {
                let k = hd * self.points + pt;
                let s = &samples[k * dh..(k + 1) * dh];
                g_weights[k] = gh.iter().zip(s).map(|(g, v)| g * v).sum();
                let a = plan.weights[k];
                for (gs, g) in g_sample.iter_mut().zip(gh) {
                    *gs = a * g;
                }
                let (x, y) = plan.locs[k];
                let (gx, gy) = sample_backward_into(
                    &values.data,
                    grad_values,
                    values.h,
                    values.w,
                    chans.clone(),
                    x,
                    y,
                    &g_sample,
                );
                g_offsets[2 * k] = gx;
                g_offsets[2 * k + 1] = gy;
            }
        }

        let mut g_logits = vec![0.0; hp];
        for ((a, g), gl) in plan
            .weights
            .chunks_exact(self.points)
            .zip(g_weights.chunks_exact(self.points))
            .zip(g_logits.chunks_exact_mut(self.points))
        {
            softmax_backward_into(a, g, gl);
        }
        self.weight_proj
            .backward_into(query, &g_logits, &mut grads.weight_proj, grad_query);
        self.offset_proj
            .backward_into(query, &g_offsets, &mut grads.offset_proj, grad_query);
    }

    /// Normalized per-head weights for a query (exposed for property tests).
    pub fn point_weights(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.check_query(query, [0.0, 0.0])?;
        Ok(self.plan(query, [0.0, 0.0], 1, 1).weights)
    }
}

struct Plan {
    weights: Vec<f64>,
    locs: Vec<(f64, f64)>,
}

/// Value map after `value_proj`, `C x H x W` flat.
#[derive(Debug, Clone)]
pub(crate) struct ProjectedValues {
    pub(crate) data: Vec<f64>,
    pub(crate) h: usize,
    pub(crate) w: usize,
}

#[derive(Debug, Clone)]
pub struct DeformAttnGrads {
    pub query: Vec<f64>,
    pub value_map: Tensor,
    pub params: DeformAttnParams,
}

pub fn deform_attn(
    query: &[f64],
    ref_point: [f64; 2],
    value_map: &Tensor,
    params: &DeformAttnParams,
) -> Result<Vec<f64>> {
    params.check_query(query, ref_point)?;
    let values = params.project_values(value_map)?;
    let mut out = vec![0.0; params.channels()];
    params.attend_into(query, ref_point, &values, &mut out);
    Ok(out)
}

pub fn deform_attn_backward(
    query: &[f64],
    ref_point: [f64; 2],
    value_map: &Tensor,
    params: &DeformAttnParams,
    grad_out: &[f64],
) -> Result<DeformAttnGrads> {
    params.check_query(query, ref_point)?;
    if grad_out.len() != params.channels() {
        return shape_err(format!("grad_out has {} entries", grad_out.len()));
    }
    let values = params.project_values(value_map)?;
    let mut grads = params.zeros_like();
    let mut grad_values = vec![0.0; values.data.len()];
    let mut grad_query = vec![0.0; params.channels()];
    params.attend_backward(
        query,
        ref_point,
        &values,
        grad_out,
        &mut grads,
        &mut grad_values,
        &mut grad_query,
    );
    let grad_map = params.project_values_backward(value_map, &grad_values, &mut grads);
    Ok(DeformAttnGrads {
        query: grad_query,
        value_map: grad_map,
        params: grads,
    })
}

fn check_grid(
    queries: &Tensor,
    refs: &Tensor,
    params: &DeformAttnParams,
) -> Result<(usize, usize)> {
    let (x, y) = match queries.shape() {
        [x, y, c] if *c == params.channels() => (*x, *y),
        s => {
            return shape_err(format!(
                "queries must be X x Y x {}, got {s:?}",
                params.channels()
            ))
        }
    };
    if refs.shape() != [x, y, 2] {
        return shape_err(format!(
            "reference points must be {x} x {y} x 2, got {:?}",
            refs.shape()
        ));
    }
    if !refs.is_finite() {
        return Err(Error::InvalidArgument(
            "reference points must be finite".into(),
        ));
    }
    Ok((x, y))
}

/// Per-cell [`deform_attn`] over an `X x Y` grid of queries, computed in
/// parallel. Each cell is independent, so the result is bit-identical to
/// [`deform_attn_grid_sequential`].
pub fn deform_attn_grid(
    queries: &Tensor,
    refs: &Tensor,
    value_map: &Tensor,
    params: &DeformAttnParams,
) -> Result<Tensor> {
    let (x, y) = check_grid(queries, refs, params)?;
    let values = params.project_values(value_map)?;
    let c = params.channels();
    let mut out = vec![0.0; x * y * c];
    out.par_chunks_mut(c)
        .zip(queries.data().par_chunks(c))
        .zip(refs.data().par_chunks(2))
        .for_each(|((o, q), r)| params.attend_into(q, [r[0], r[1]], &values, o));
    Tensor::new(vec![x, y, c], out)
}

pub fn deform_attn_grid_sequential(
    queries: &Tensor,
    refs: &Tensor,
    value_map: &Tensor,
    params: &DeformAttnParams,
) -> Result<Tensor> {
    let (x, y) = check_grid(queries, refs, params)?;
    let values = params.project_values(value_map)?;
    let c = params.channels();
    let mut out = vec![0.0; x * y * c];
    for ((o, q), r) in out
        .chunks_mut(c)
        .zip(queries.data().chunks(c))
        .zip(refs.data().chunks(2))
    {
        params.attend_into(q, [r[0], r[1]], &values, o);
    }
    Tensor::new(vec![x, y, c], out)
}

#[derive(Debug, Clone)]
pub struct GridGrads {
    pub queries: Tensor,
    pub value_map: Tensor,
    pub params: DeformAttnParams,
}

/// Backward of [`deform_attn_grid`]; cells are reduced in a fixed order.
pub fn deform_attn_grid_backward(
    queries: &Tensor,
    refs: &Tensor,
    value_map: &Tensor,
    params: &DeformAttnParams,
    grad_out: &Tensor,
) -> Result<GridGrads> {
    let (x, y) = check_grid(queries, refs, params)?;
    if grad_out.shape() != queries.shape() {
        return shape_err(format!(
            "grad_out {:?} does not match queries {:?}",
            grad_out.shape(),
            queries.shape()
        ));
    }
    let values = params.project_values(value_map)?;
    let c = params.channels();
    let mut grads = params.zeros_like();
    let mut grad_values = vec![0.0; values.data.len()];
    let mut grad_queries = vec![0.0; x * y * c];
    for (((gq, q), r), g) in grad_queries
        .chunks_mut(c)
        .zip(queries.data().chunks(c))
        .zip(refs.data().chunks(2))
        .zip(grad_out.data().chunks(c))
    {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        params.attend_backward(
            q,
            [r[0], r[1]],
            &values,
            g,
            &mut grads,
            &mut grad_values,
            gq,
        );
    }
    let grad_map = params.project_values_backward(value_map, &grad_values, &mut grads);
    Ok(GridGrads {
        queries: Tensor::new(vec![x, y, c], grad_queries)?,
        value_map: grad_map,
        params: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{bilinear_sample, grad_check, seeded_rng};
    use rand::Rng;

    /// Independent per-head, per-point loop.
    fn naive(query: &[f64], r: [f64; 2], map: &Tensor, p: &DeformAttnParams) -> Vec<f64> {
        let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let lin = |l: &LinearParams, v: &[f64]| -> Vec<f64> {
            (0..l.out_dim())
                .map(|o| {
                    l.bias.get(&[o])
                        + (0..l.in_dim())
                            .map(|i| l.weight.get(&[o, i]) * v[i])
                            .sum::<f64>()
                })
                .collect()
        };
        let mut projected = Tensor::zeros(&[c, h, w]);
        for row in 0..h {
            for col in 0..w {
                let px: Vec<f64> = (0..c).map(|k| map.get(&[k, row, col])).collect();
                let v = lin(&p.value_proj, &px);
                for k in 0..c {
                    projected.set(&[k, row, col], v[k]);
                }
            }
        }
        let off = lin(&p.offset_proj, query);
        let logit = lin(&p.weight_proj, query);
        let dh = c / p.heads;
        let mut cat = vec![0.0; c];
        for hd in 0..p.heads {
            let ls = &logit[hd * p.points..(hd + 1) * p.points];
            let m = ls.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = ls.iter().map(|l| (l - m).exp()).sum();
            for pt in 0..p.points {
                let k = hd * p.points + pt;
                let a = (ls[pt] - m).exp() / z;
                let sx = r[0] * (w - 1) as f64 + off[2 * k];
                let sy = r[1] * (h - 1) as f64 + off[2 * k + 1];
                let s = bilinear_sample(&projected, sx, sy).unwrap();
                for d in 0..dh {
                    cat[hd * dh + d] += a * s[hd * dh + d];
                }
            }
        }
        lin(&p.output_proj, &cat)
    }

    #[test]
    fn identity_params_sample_reference() {
        let mut rng = seeded_rng(1);
        let map = Tensor::random_uniform(&[4, 6, 9], 1.0, &mut rng);
        for (heads, points) in [(1, 1), (1, 4), (2, 3), (4, 4)] {
            let p = DeformAttnParams::identity(4, heads, points).unwrap();
            let q = [0.3, -0.1, 2.0, 0.7];
            let r = [0.41, 0.77];
            let got = deform_attn(&q, r, &map, &p).unwrap();
            let want = bilinear_sample(&map, r[0] * 8.0, r[1] * 5.0).unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut rng = seeded_rng(2);
        let mut p = DeformAttnParams::random(4, 2, 2, 1.0, &mut rng).unwrap();
        p.output_proj = LinearParams::zeros(4, 4);
        let map = Tensor::random_uniform(&[4, 5, 5], 1.0, &mut rng);
        assert_eq!(
            deform_attn(&[1.0, 2.0, 3.0, 4.0], [0.5, 0.5], &map, &p).unwrap(),
            vec![0.0; 4]
        );
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = seeded_rng(3);
        for _ in 0..20 {
            let p = DeformAttnParams::random(8, 2, 4, 1.5, &mut rng).unwrap();
            let map = Tensor::random_uniform(&[8, 8, 8], 1.0, &mut rng);
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = [rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)];
            let got = deform_attn(&q, r, &map, &p).unwrap();
            let want = naive(&q, r, &map, &p);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let p = DeformAttnParams::identity(4, 2, 2).unwrap();
        let map = Tensor::zeros(&[4, 3, 3]);
        assert!(deform_attn(&[0.0; 3], [0.0, 0.0], &map, &p).is_err());
        assert!(deform_attn(&[0.0; 4], [0.0, 0.0], &Tensor::zeros(&[3, 3, 3]), &p).is_err());
        assert!(DeformAttnParams::identity(6, 4, 1).is_err());
    }

    #[test]
    fn backward_zero_grad_out() {
        let mut rng = seeded_rng(4);
        let p = DeformAttnParams::random(4, 2, 2, 1.0, &mut rng).unwrap();
        let map = Tensor::random_uniform(&[4, 6, 6], 1.0, &mut rng);
        let g =
            deform_attn_backward(&[0.1, 0.2, 0.3, 0.4], [0.3, 0.6], &map, &p, &[0.0; 4]).unwrap();
        let mut flat = Vec::new();
        g.params.flatten_into(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
        assert!(g.query.iter().all(|&v| v == 0.0));
        assert!(g.value_map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_map_gives_no_offset_gradient() {
        let mut rng = seeded_rng(5);
        let p = DeformAttnParams::init(4, 2, 3, &mut rng).unwrap();
        let map = Tensor::filled(&[4, 8, 8], 0.8);
        let g = deform_attn_backward(
            &[0.5, -0.2, 0.1, 0.9],
            [0.5, 0.5],
            &map,
            &p,
            &[1.0, -1.0, 0.5, 2.0],
        )
        .unwrap();
        assert!(g
            .params
            .offset_proj
            .weight
            .data()
            .iter()
            .all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn backward_passes_grad_check() {
        let mut rng = seeded_rng(6);
        for _ in 0..5 {
            let p = DeformAttnParams::random(4, 2, 2, 1.5, &mut rng).unwrap();
            let map = Tensor::random_uniform(&[4, 8, 8], 1.0, &mut rng);
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let go: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            let mut theta = q.clone();
            p.flatten_into(&mut theta);
            theta.extend_from_slice(map.data());
            let err = grad_check(
                |v: &[f64]| {
                    let mut pp = p.clone();
                    let rest = pp.assign_from(&v[4..]);
                    let m = Tensor::new(vec![4, 8, 8], rest.to_vec()).unwrap();
                    let out = deform_attn(&v[..4], r, &m, &pp).unwrap();
                    let val = out.iter().zip(&go).map(|(a, b)| a * b).sum();
                    let g = deform_attn_backward(&v[..4], r, &m, &pp, &go).unwrap();
                    let mut grad = g.query.clone();
                    g.params.flatten_into(&mut grad);
                    grad.extend_from_slice(g.value_map.data());
                    (val, grad)
                },
                &theta,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn grid_matches_sequential_calls() {
        let mut rng = seeded_rng(7);
        let p = DeformAttnParams::random(4, 2, 2, 1.0, &mut rng).unwrap();
        let map = Tensor::random_uniform(&[4, 7, 5], 1.0, &mut rng);
        let qs = Tensor::random_uniform(&[4, 4, 4], 1.0, &mut rng);
        let refs = Tensor::from_fn(&[4, 4, 2], |ix| (ix[0] + 2 * ix[1] + ix[2]) as f64 / 9.0);
        let grid = deform_attn_grid(&qs, &refs, &map, &p).unwrap();
        let seq = deform_attn_grid_sequential(&qs, &refs, &map, &p).unwrap();
        assert_eq!(grid, seq);
        for i in 0..4 {
            for j in 0..4 {
                let q: Vec<f64> = (0..4).map(|k| qs.get(&[i, j, k])).collect();
                let r = [refs.get(&[i, j, 0]), refs.get(&[i, j, 1])];
                let one = deform_attn(&q, r, &map, &p).unwrap();
                for k in 0..4 {
                    assert_eq!(grid.get(&[i, j, k]), one[k]);
                }
            }
        }
        assert!(deform_attn_grid(&qs, &Tensor::zeros(&[4, 3, 2]), &map, &p).is_err());
    }

    #[test]
    fn weights_are_normalized_per_head() {
        let mut rng = seeded_rng(8);
        let p = DeformAttnParams::random(8, 4, 3, 1.0, &mut rng).unwrap();
        let w = p.point_weights(&[0.5; 8]).unwrap();
        for head in w.chunks(3) {
            assert!(head.iter().all(|&a| a > 0.0));
            assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
