//! Query/key encoder, geo-classification head and the momentum update.
//!
//! The encoder is a stack of fully connected tanh blocks (the backbone)
//! followed by a small projection head and L2 normalization. There are no
//! batch-coupled statistics, so each row is encoded independently of its
//! batch. Gradients are computed by hand in [`Encoder::backward`].

mod params;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub(crate) use params::check_same_shapes;
pub use params::{axpy, scale_params, Dense, ParamSet};

use crate::data::{Image, ImageGeometry};
use crate::error::{Error, Result};
use crate::queue::NegativeQueue;

/// Which encoder output a linear head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Last backbone block, before the projection head.
    Backbone,
    /// Normalized embedding after the projection head.
    #[default]
    Projection,
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(FeatureSource::Backbone),
            "projection" => Ok(FeatureSource::Projection),
            other => Err(Error::Config(format!(
                "unknown feature source `{other}` (expected backbone or projection)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub geometry: ImageGeometry,
    /// Side of the fixed average-pooling window applied to the input.
    pub pool: usize,
    /// Width of each backbone block.
    pub hidden: Vec<usize>,
    /// Embedding dimension `d`.
    pub embed_dim: usize,
    /// Number of layers in the projection head.
    pub proj_depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            geometry: ImageGeometry::default(),
            pool: 4,
            hidden: vec![256, 128],
            embed_dim: 64,
            proj_depth: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.geometry.is_empty() {
            return Err(Error::config("encoder input geometry must be non-zero"));
        }
        if self.pool == 0 || self.geometry.h % self.pool != 0 || self.geometry.w % self.pool != 0 {
            return Err(Error::config(format!(
                "pooling window {} must divide the image size {}x{}",
                self.pool, self.geometry.h, self.geometry.w
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(
                "encoder needs at least one block of non-zero width",
            ));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embedding dimension must be at least 2"));
        }
        if self.proj_depth == 0 {
            return Err(Error::config("projection head needs at least one layer"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.geometry.len()
    }

    /// Width of the pooled input seen by the first block.
    pub fn pooled_dim(&self) -> usize {
        self.geometry.len() / (self.pool * self.pool)
    }

    /// Width of the backbone output.
    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated")
    }

    pub fn source_dim(&self, source: FeatureSource) -> usize {
        match source {
            FeatureSource::Backbone => self.feature_dim(),
            FeatureSource::Projection => self.embed_dim,
        }
    }
}

/// Encoder weights (`θ_q` or `θ_k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub stem: Stem,
    pub backbone: Vec<Dense>,
    pub projection: Vec<Dense>,
}

impl ParamSet for EncoderParams {
    fn arrays(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (part, layers) in [
            ("backbone", &self.backbone),
            ("projection", &self.projection),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                for (name, a) in layer.arrays() {
                    out.push((format!("{part}.{i}.{name}"), a));
                }
            }
        }
        out
    }

    fn arrays_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f64>> {
        self.backbone
            .iter_mut()
            .chain(self.projection.iter_mut())
            .flat_map(|l| l.arrays_mut())
            .collect()
    }
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut backbone = Vec::with_capacity(cfg.hidden.len());
        let mut width = cfg.pooled_dim();
        for &h in &cfg.hidden {
            backbone.push(Dense::init(width, h, rng));
            width = h;
        }
        let mut projection = Vec::with_capacity(cfg.proj_depth);
        for i in 0..cfg.proj_depth {
            let out = if i + 1 == cfg.proj_depth {
                cfg.embed_dim
            } else {
                width
            };
            projection.push(Dense::init(width, out, rng));
            width = out;
        }
        Ok(Self {
            stem: Stem {
                geometry: cfg.geometry,
                pool: cfg.pool,
            },
            backbone,
            projection,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stem: self.stem,
            backbone: self.backbone.iter().map(Dense::zeros_like).collect(),
            projection: self.projection.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.stem.geometry.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.last().map(Dense::fan_out).unwrap_or(0)
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.last().map(Dense::fan_out).unwrap_or(0)
    }

    pub fn source_dim(&self, source: FeatureSource) -> usize {
        match source {
            FeatureSource::Backbone => self.feature_dim(),
            FeatureSource::Projection => self.embed_dim(),
        }
    }
}

/// Fixed (parameter-free) average pooling over `pool x pool` pixel windows,
/// per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stem {
    pub geometry: ImageGeometry,
    pub pool: usize,
}

impl Stem {
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let p = self.pool;
        if p == 1 {
            return x.clone();
        }
        let ImageGeometry { h, w, ch } = self.geometry;
        let pw = w / p;
        let norm = 1.0 / (p * p) as f64;
        let mut out = Array2::zeros((x.nrows(), x.ncols() / (p * p)));
        for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            for i in 0..h {
                for j in 0..w {
                    let base = ((i / p) * pw + j / p) * ch;
                    let at = (i * w + j) * ch;
                    for c in 0..ch {
                        dst[base + c] += src[at + c] * norm;
                    }
                }
            }
        }
        out
    }
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `acts[0]` is the pooled input; `acts[i + 1]` the output of layer `i`
    /// (backbone layers first, then projection layers).
    acts: Vec<Array2<f64>>,
    n_backbone: usize,
    norms: Array1<f64>,
    embeddings: Array2<f64>,
}

impl EncoderTrace {
    /// Backbone output, one row per input.
    pub fn features(&self) -> &Array2<f64> {
        &self.acts[self.n_backbone]
    }

    /// Unit-norm embeddings, one row per input.
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn source(&self, source: FeatureSource) -> &Array2<f64> {
        match source {
            FeatureSource::Backbone => self.features(),
            FeatureSource::Projection => self.embeddings(),
        }
    }

    pub fn into_embeddings(self) -> Array2<f64> {
        self.embeddings
    }
}

/// Pixel offset subtracted from every input value.
const INPUT_CENTER: f64 = 0.5;

/// Flatten images into rows of a centred input matrix.
pub fn images_to_matrix<'a, I>(images: I, geometry: ImageGeometry) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = &'a Image>,
{
    let images: Vec<&Image> = images.into_iter().collect();
    let mut out = Array2::zeros((images.len(), geometry.len()));
    for (mut row, img) in out.outer_iter_mut().zip(&images) {
        if img.dim() != geometry.shape() {
            return Err(Error::shape(format!(
                "image shape {:?} differs from encoder geometry {:?}",
                img.dim(),
                geometry.shape()
            )));
        }
        Zip::from(&mut row)
            .and(
                img.as_standard_layout()
                    .view()
                    .into_shape_with_order(geometry.len())
                    .expect("contiguous"),
            )
            .for_each(|r, &v| *r = f64::from(v) - INPUT_CENTER);
    }
    Ok(out)
}

fn check_finite(a: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite activations in {}",
            what()
        )))
    }
}

/// Stateless encoder operations over a parameter set.
pub struct Encoder;

impl Encoder {
    /// Forward pass over an `n x input_dim` batch.
    pub fn forward(params: &EncoderParams, x: &Array2<f64>) -> Result<EncoderTrace> {
        if x.ncols() != params.input_dim() {
            return Err(Error::shape(format!(
                "batch has {} columns, encoder expects {}",
                x.ncols(),
                params.input_dim()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::shape("batch must contain at least one row"));
        }
        let n_backbone = params.backbone.len();
        let n_proj = params.projection.len();
        let mut acts = Vec::with_capacity(n_backbone + n_proj + 1);
        acts.push(params.stem.apply(x));
        for (i, layer) in params.backbone.iter().enumerate() {
            let mut y = layer.forward(acts.last().expect("input"));
            y.mapv_inplace(f64::tanh);
            check_finite(&y, || format!("backbone.{i}"))?;
            acts.push(y);
        }
        for (i, layer) in params.projection.iter().enumerate() {
            let mut y = layer.forward(acts.last().expect("input"));
            if i + 1 < n_proj {
                y.mapv_inplace(f64::tanh);
            }
            check_finite(&y, || format!("projection.{i}"))?;
            acts.push(y);
        }
        let raw = acts.last().expect("output");
        let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if norms.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(Error::Numeric(
                "degenerate embedding norm in l2-normalize".into(),
            ));
        }
        let embeddings = raw / &norms.view().insert_axis(Axis(1));
        Ok(EncoderTrace {
            acts,
            n_backbone,
            norms,
            embeddings,
        })
    }

    /// Unit-norm embeddings of a batch.
    pub fn encode(params: &EncoderParams, x: &Array2<f64>) -> Result<Array2<f64>> {
        Self::forward(params, x).map(EncoderTrace::into_embeddings)
    }

    /// Backbone features of a batch.
    pub fn features(params: &EncoderParams, x: &Array2<f64>) -> Result<Array2<f64>> {
        // Skip the projection head: only the backbone is needed.
        if x.ncols() != params.input_dim() {
            return Err(Error::shape(format!(
                "batch has {} columns, encoder expects {}",
                x.ncols(),
                params.input_dim()
            )));
        }
        let mut h = params.stem.apply(x);
        for (i, layer) in params.backbone.iter().enumerate() {
            h = layer.forward(&h);
            h.mapv_inplace(f64::tanh);
            check_finite(&h, || format!("backbone.{i}"))?;
        }
        Ok(h)
    }

    /// Backpropagate upstream gradients w.r.t. the embeddings and/or the
    /// backbone features into parameter gradients.
    pub fn backward(
        params: &EncoderParams,
        trace: &EncoderTrace,
        grad_embeddings: Option<ArrayView2<'_, f64>>,
        grad_features: Option<ArrayView2<'_, f64>>,
    ) -> EncoderParams {
        let mut grads = params.zeros_like();
        let n_backbone = trace.n_backbone;
        let n_proj = params.projection.len();

        // Gradient w.r.t. the current layer's output; None means zero.
        let mut upstream: Option<Array2<f64>> = grad_embeddings.map(|g| {
            // d(u/|u|)/du applied row-wise: (g - z (z.g)) / |u|
            let z = &trace.embeddings;
            let zg = (z * &g).sum_axis(Axis(1)).insert_axis(Axis(1));
            (&g - &(z * &zg)) / trace.norms.view().insert_axis(Axis(1))
        });

        for li in (0..n_backbone + n_proj).rev() {
            if li + 1 == n_backbone {
                if let Some(gf) = grad_features {
                    upstream = Some(match upstream {
                        Some(u) => u + gf,
                        None => gf.to_owned(),
                    });
                }
            }
            let Some(mut g) = upstream.take() else {
                continue;
            };
            let out = &trace.acts[li + 1];
            let input = &trace.acts[li];
            let is_last_proj = li == n_backbone + n_proj - 1;
            if !is_last_proj {
                Zip::from(&mut g)
                    .and(out)
                    .for_each(|g, &y| *g *= 1.0 - y * y);
            }
            let (layer, grad_layer) = if li < n_backbone {
                (&params.backbone[li], &mut grads.backbone[li])
            } else {
                (
                    &params.projection[li - n_backbone],
                    &mut grads.projection[li - n_backbone],
                )
            };
            grad_layer.weight = input.t().dot(&g);
            grad_layer.bias = g.sum_axis(Axis(0));
            if li > 0 {
                upstream = Some(g.dot(&layer.weight.t()));
            }
        }
        grads
    }
}

/// Linear geo-classifier `f_c`: logits `z W + b`, `W` of shape `(d, K)`.
pub type GeoHeadParams = Dense;

/// Geo-classifier logits for a batch of representations.
pub fn geo_logits(head: &GeoHeadParams, z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.ncols() != head.fan_in() {
        return Err(Error::shape(format!(
            "representations have {} columns, geo head expects {}",
            z.ncols(),
            head.fan_in()
        )));
    }
    Ok(head.forward(z))
}

/// Exponential moving average `θ_k <- m θ_k + (1 - m) θ_q`, in place.
pub fn momentum_update<P: ParamSet>(key: &mut P, query: &P, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config(format!(
            "momentum must lie in [0, 1], got {m}"
        )));
    }
    check_same_shapes(key, query)?;
    for (mut k, (_, q)) in key.arrays_mut().into_iter().zip(query.arrays()) {
        if m == 0.0 {
            k.assign(&q);
        } else if m < 1.0 {
            Zip::from(&mut k)
                .and(&q)
                .for_each(|k, &q| *k = m * *k + (1.0 - m) * q);
        }
    }
    Ok(())
}

/// Query encoder, key encoder, optional geo head and the negative queue.
#[derive(Debug, Clone, PartialEq)]
pub struct MoCoState {
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub geo_head: Option<GeoHeadParams>,
    pub queue: NegativeQueue,
    pub step: u64,
}

impl MoCoState {
    /// Fresh state; the key encoder starts as an exact copy of the query encoder.
    pub fn init<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        geo_head: Option<(FeatureSource, usize)>,
        queue_capacity: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let query = EncoderParams::init(cfg, rng)?;
        let geo_head = geo_head.map(|(source, k)| Dense::init(cfg.source_dim(source), k, rng));
        Ok(Self {
            key: query.clone(),
            query,
            geo_head,
            queue: NegativeQueue::new(queue_capacity, cfg.embed_dim)?,
            step: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (EncoderConfig, EncoderParams, ChaCha8Rng) {
        let cfg = EncoderConfig {
            geometry: ImageGeometry::new(3, 3, 2),
            pool: 1,
            hidden: vec![7, 5],
            embed_dim: 4,
            proj_depth: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(&cfg, &mut rng).unwrap();
        (cfg, p, rng)
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-0.5..0.5))
    }

    #[test]
    fn rows_are_unit_norm() {
        let (cfg, p, mut rng) = tiny();
        let x = batch(&mut rng, 6, cfg.input_dim());
        let z = Encoder::encode(&p, &x).unwrap();
        for row in z.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_independence() {
        let (cfg, p, mut rng) = tiny();
        let x = batch(&mut rng, 2, cfg.input_dim());
        let together = Encoder::encode(&p, &x).unwrap();
        for i in 0..2 {
            let alone =
                Encoder::encode(&p, &x.slice(ndarray::s![i..i + 1, ..]).to_owned()).unwrap();
            for j in 0..cfg.embed_dim {
                assert!((alone[[0, j]] - together[[i, j]]).abs() < 1e-6);
            }
        }
        let dup = ndarray::concatenate![
            Axis(0),
            x.slice(ndarray::s![0..1, ..]),
            x.slice(ndarray::s![0..1, ..])
        ];
        let zd = Encoder::encode(&p, &dup).unwrap();
        assert_eq!(zd.row(0), zd.row(1));
    }

    #[test]
    fn geometry_mismatch_is_a_shape_error() {
        let (_, p, mut rng) = tiny();
        let x = batch(&mut rng, 2, 5);
        assert!(matches!(Encoder::encode(&p, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_input_names_a_layer() {
        let (cfg, p, _) = tiny();
        let mut x = Array2::zeros((1, cfg.input_dim()));
        x[[0, 0]] = f64::NAN;
        match Encoder::encode(&p, &x) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("backbone.0"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn features_match_trace() {
        let (cfg, p, mut rng) = tiny();
        let x = batch(&mut rng, 3, cfg.input_dim());
        let t = Encoder::forward(&p, &x).unwrap();
        assert_eq!(&Encoder::features(&p, &x).unwrap(), t.features());
    }

    #[test]
    fn geo_logits_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = Dense::zeros(4, 3);
        let z = batch(&mut rng, 2, 4);
        assert!(geo_logits(&head, &z).unwrap().iter().all(|&v| v == 0.0));

        let head = Dense {
            weight: batch(&mut rng, 4, 3),
            bias: Array1::from_vec(vec![0.1, -0.2, 0.3]),
        };
        let mut e = Array2::zeros((1, 4));
        e[[0, 2]] = 1.0;
        let l = geo_logits(&head, &e).unwrap();
        for k in 0..3 {
            assert_eq!(l[[0, k]], head.weight[[2, k]] + head.bias[k]);
        }
        let z = batch(&mut rng, 5, 4);
        let l = geo_logits(&head, &z).unwrap();
        for i in 0..5 {
            for k in 0..3 {
                let mut acc = head.bias[k];
                for j in 0..4 {
                    acc += z[[i, j]] * head.weight[[j, k]];
                }
                assert!((l[[i, k]] - acc).abs() < 1e-9);
            }
        }
        assert!(matches!(
            geo_logits(&head, &batch(&mut rng, 1, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn momentum_extremes_and_midpoint() {
        let (_, q, mut rng) = tiny();
        let k0 = EncoderParams::init(
            &EncoderConfig {
                geometry: ImageGeometry::new(3, 3, 2),
                pool: 1,
                hidden: vec![7, 5],
                embed_dim: 4,
                proj_depth: 2,
            },
            &mut rng,
        )
        .unwrap();
        let mut k = k0.clone();
        momentum_update(&mut k, &q, 1.0).unwrap();
        assert_eq!(k, k0);
        momentum_update(&mut k, &q, 0.0).unwrap();
        assert_eq!(k, q);

        let mut a = Dense::zeros(1, 1);
        let mut b = Dense::zeros(1, 1);
        b.weight[[0, 0]] = 2.0;
        b.bias[0] = 2.0;
        momentum_update(&mut a, &b, 0.5).unwrap();
        assert_eq!(a.weight[[0, 0]], 1.0);
        assert_eq!(a.bias[0], 1.0);
    }

    #[test]
    fn momentum_shape_mismatch() {
        let mut a = Dense::zeros(2, 2);
        let b = Dense::zeros(2, 3);
        assert!(matches!(
            momentum_update(&mut a, &b, 0.5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn repeated_momentum_converges_geometrically() {
        let (cfg, q, mut rng) = tiny();
        let mut k = EncoderParams::init(&cfg, &mut rng).unwrap();
        let mut diff0 = k.clone();
        axpy(&mut diff0, -1.0, &q);
        let d0 = diff0.l2_norm();
        let m: f64 = 0.9;
        for s in 1..=30 {
            momentum_update(&mut k, &q, m).unwrap();
            let mut diff = k.clone();
            axpy(&mut diff, -1.0, &q);
            let expected = m.powi(s) * d0;
            assert!((diff.l2_norm() - expected).abs() <= 1e-6 * expected);
        }
    }

    #[test]
    fn key_starts_equal_to_query() {
        let (cfg, _, mut rng) = tiny();
        let s = MoCoState::init(&cfg, Some((FeatureSource::Projection, 3)), 8, &mut rng).unwrap();
        assert_eq!(s.key, s.query);
        assert_eq!(s.geo_head.unwrap().weight.dim(), (4, 3));
    }

    #[test]
    fn stem_averages_windows_per_channel() {
        let geometry = ImageGeometry::new(4, 6, 2);
        let stem = Stem { geometry, pool: 2 };
        let x = Array2::from_shape_fn((2, geometry.len()), |(r, k)| (r * 100 + k) as f64);
        let y = stem.apply(&x);
        assert_eq!(y.dim(), (2, 12));
        for r in 0..2 {
            for (pi, pj, c) in window_grid(2, 3, 2) {
                let mut acc = 0.0;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    acc += x[[r, ((2 * pi + di) * 6 + 2 * pj + dj) * 2 + c]];
                }
                assert!((y[[r, (pi * 3 + pj) * 2 + c]] - acc / 4.0).abs() < 1e-12);
            }
        }
    }

    fn window_grid(a: usize, b: usize, c: usize) -> Vec<(usize, usize, usize)> {
        (0..a)
            .flat_map(|i| (0..b).flat_map(move |j| (0..c).map(move |k| (i, j, k))))
            .collect()
    }

    #[test]
    fn pool_must_divide_image() {
        let cfg = EncoderConfig {
            geometry: ImageGeometry::new(6, 6, 1),
            pool: 4,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert_eq!(EncoderConfig::default().pooled_dim(), 192);
    }
}
