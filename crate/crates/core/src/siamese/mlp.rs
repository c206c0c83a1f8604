use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::{normalize_backward, normalize_with_cache, NormCache};
use crate::error::{Error, Result};

/// Epsilon of the batch-standardization layers.
pub const BN_EPS: f64 = 1e-5;

/// Layer widths `[input, hidden.., output]`. Hidden layers are
/// `linear -> batch-standardization (optional) -> relu`; the last layer is
/// linear only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            widths: vec![16, 64, 64, 32],
            batch_norm: true,
        }
    }
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, batch_norm: bool) -> Result<Self> {
        let spec = Self { widths, batch_norm };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "mlp needs at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "mlp widths must be >= 1, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn has_bn(&self, layer: usize) -> bool {
        self.batch_norm && layer + 1 < self.num_layers()
    }
}

/// One linear layer plus the affine part of its batch-standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

impl Layer {
    fn zeros(input: usize, output: usize, bn: bool) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
            gamma: bn.then(|| Array1::zeros(output)),
            beta: bn.then(|| Array1::zeros(output)),
        }
    }

    /// Parameter tensors in storage order, each flagged `true` if it is a
    /// weight matrix (the only tensors subject to weight decay).
    fn slices(&self) -> Vec<(&[f64], bool)> {
        let mut out = vec![
            (self.w.as_slice().expect("standard layout"), true),
            (self.b.as_slice().expect("standard layout"), false),
        ];
        for t in [&self.gamma, &self.beta].into_iter().flatten() {
            out.push((t.as_slice().expect("standard layout"), false));
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out = vec![
            (self.w.as_slice_mut().expect("standard layout"), true),
            (self.b.as_slice_mut().expect("standard layout"), false),
        ];
        for t in [&mut self.gamma, &mut self.beta].into_iter().flatten() {
            out.push((t.as_slice_mut().expect("standard layout"), false));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

struct LayerCache {
    input: Array2<f64>,
    norm: Option<(NormCache, Array2<f64>)>,
    pre_relu: Option<Array2<f64>>,
}

/// Activations kept by [`Mlp::forward_cached`] for the backward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

impl Mlp {
    /// All parameters zero (also the shape of a gradient buffer).
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.num_layers())
            .map(|l| Layer::zeros(spec.widths[l], spec.widths[l + 1], spec.has_bn(l)))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// He-normal weights for rectifier layers, `N(0, 1/in)` for the output
    /// layer, zero biases, unit scale and zero shift in batch-standardization.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(spec)?;
        let last = mlp.layers.len() - 1;
        for (l, layer) in mlp.layers.iter_mut().enumerate() {
            let fan_in = layer.w.ncols() as f64;
            let std = if l == last {
                (1.0 / fan_in).sqrt()
            } else {
                (2.0 / fan_in).sqrt()
            };
            layer
                .w
                .mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
            if let Some(g) = layer.gamma.as_mut() {
                g.fill(1.0);
            }
        }
        Ok(mlp)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.spec).expect("spec already validated")
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|(s, _)| s.len()).sum()
    }

    pub fn slices(&self) -> Vec<(&[f64], bool)> {
        self.layers.iter().flat_map(Layer::slices).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        self.layers.iter_mut().flat_map(Layer::slices_mut).collect()
    }

    /// Parameters flattened in storage order.
    pub fn flat(&self) -> Vec<f64> {
        self.slices()
            .into_iter()
            .flat_map(|(s, _)| s.iter().copied())
            .collect()
    }

    /// Overwrites all parameters from a flat vector in storage order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::dims(self.num_params(), values.len()));
        }
        let mut offset = 0;
        for (s, _) in self.slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|(s, _)| s.iter().all(|v| v.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|(s, _)| s.iter())
            .map(|v| v * v)
            .sum()
    }

    /// `self += c · other`
    pub fn scaled_add(&mut self, c: f64, other: &Mlp) {
        for ((dst, _), (src, _)) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += c * s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (s, _) in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn fill_zero(&mut self) {
        for (s, _) in self.slices_mut() {
            s.fill(0.0);
        }
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.nrows() != self.spec.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, network expects {}",
                x.nrows(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass on a `features × batch` matrix.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let (out, cache) = self.run(x, true)?;
        Ok((out, cache.expect("requested")))
    }

    fn run(
        &self,
        x: ArrayView2<'_, f64>,
        keep: bool,
    ) -> Result<(Array2<f64>, Option<ForwardCache>)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut u = layer.w.dot(&a) + layer.b.view().insert_axis(Axis(1));
            let mut norm = None;
            if let (Some(gamma), Some(beta)) = (&layer.gamma, &layer.beta) {
                let (xhat, nc) = normalize_with_cache(u.view(), BN_EPS)?;
                let xhat = xhat.into_data();
                u = &xhat * &gamma.view().insert_axis(Axis(1)) + beta.view().insert_axis(Axis(1));
                if keep {
                    norm = Some((nc, xhat));
                }
            }
            let next = if l < last {
                u.mapv(|v| v.max(0.0))
            } else {
                u.clone()
            };
            if keep {
                caches.push(LayerCache {
                    input: a,
                    norm,
                    pre_relu: (l < last).then_some(u),
                });
            }
            a = next;
        }
        Ok((a, keep.then_some(ForwardCache { layers: caches })))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<'_, f64>,
        grads: &mut Mlp,
    ) -> Array2<f64> {
        let mut g = grad_out.to_owned();
        for ((layer, lc), gl) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            if let Some(pre) = &lc.pre_relu {
                ndarray::Zip::from(&mut g).and(pre).for_each(|gv, &p| {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            if let (Some((nc, xhat)), Some(gamma)) = (&lc.norm, &layer.gamma) {
                let gg = gl.gamma.as_mut().expect("mirrors layer");
                *gg += &(&g * xhat).sum_axis(Axis(1));
                let gb = gl.beta.as_mut().expect("mirrors layer");
                *gb += &g.sum_axis(Axis(1));
                g *= &gamma.view().insert_axis(Axis(1));
                g = normalize_backward(nc, g.view());
            }
            gl.w += &g.dot(&lc.input.t());
            gl.b += &g.sum_axis(Axis(1));
            g = layer.w.t().dot(&g);
        }
        g
    }
}
