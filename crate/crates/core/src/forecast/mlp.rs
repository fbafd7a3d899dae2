//! Fully connected network with mini-batch training, dropout and early
//! stopping.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `inputs x outputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct RawLayer {
    activation: Activation,
    /// Row-major `inputs x outputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMlp {
    layer_sizes: Vec<usize>,
    layers: Vec<RawLayer>,
}

/// Feed-forward network; serialized with a layer-size header followed by
/// row-major weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMlp", into = "RawMlp")]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl From<Mlp> for RawMlp {
    fn from(m: Mlp) -> Self {
        RawMlp {
            layer_sizes: m.layer_sizes(),
            layers: m
                .layers
                .into_iter()
                .map(|l| RawLayer {
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<RawMlp> for Mlp {
    type Error = String;

    fn try_from(raw: RawMlp) -> std::result::Result<Self, String> {
        if raw.layer_sizes.len() != raw.layers.len() + 1 {
            return Err(format!(
                "{} layer sizes for {} layers",
                raw.layer_sizes.len(),
                raw.layers.len()
            ));
        }
        let layers = raw
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let (n_in, n_out) = (raw.layer_sizes[i], raw.layer_sizes[i + 1]);
                if l.bias.len() != n_out {
                    return Err(format!("layer {i}: {} biases for {n_out} outputs", l.bias.len()));
                }
                let weights = Array2::from_shape_vec((n_in, n_out), l.weights)
                    .map_err(|e| format!("layer {i}: {e}"))?;
                Ok(Layer {
                    weights,
                    bias: Array1::from(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<std::result::Result<_, String>>()?;
        Ok(Mlp { layers })
    }
}

impl Mlp {
    /// He-initialized weights for ReLU hidden layers and Glorot for the
    /// output layer; zero biases.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return arg(format!("invalid layer sizes {sizes:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (n_in, n_out) = (sizes[i], sizes[i + 1]);
                let activation = if i + 1 == n { output } else { hidden };
                let std = match activation {
                    Activation::Relu => (2.0 / n_in as f64).sqrt(),
                    _ => (2.0 / (n_in + n_out) as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                Layer {
                    weights: Array2::from_shape_simple_fn((n_in, n_out), || normal.sample(&mut rng)),
                    bias: Array1::zeros(n_out),
                    activation,
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_len()];
        s.extend(self.layers.iter().map(|l| l.bias.len()));
        s
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map(|l| l.weights.nrows()).unwrap_or(0)
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map(|l| l.weights.ncols()).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Input("network without layers".into()));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].weights.ncols() != w[1].weights.nrows() {
                return Err(Error::Input(format!("layer {i} output does not match layer {} input", i + 1)));
            }
        }
        if self
            .layers
            .iter()
            .any(|l| l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()))
        {
            return Err(Error::Input("network has non-finite weights".into()));
        }
        Ok(())
    }

    /// Activations of every layer (input first) and, per hidden layer, the
    /// dropout factors applied to it (0 for dropped units, `1 / (1 - rate)`
    /// for kept ones).
    fn forward_all(
        &self,
        x: ArrayView2<f64>,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (Vec<Array2<f64>>, Vec<Option<Array2<f64>>>) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut masks = Vec::with_capacity(self.layers.len());
        acts.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights) + &layer.bias;
            layer.activation.apply(&mut z);
            let mut mask = None;
            if i < last {
                if let Some((rate, rng)) = dropout.as_mut() {
                    if *rate > 0.0 {
                        let keep = 1.0 / (1.0 - *rate);
                        let m = Array2::from_shape_simple_fn(z.raw_dim(), || {
                            if rng.random::<f64>() < *rate {
                                0.0
                            } else {
                                keep
                            }
                        });
                        z *= &m;
                        mask = Some(m);
                    }
                }
            }
            acts.push(z);
            masks.push(mask);
        }
        (acts, masks)
    }

    /// Inference on a batch (rows are samples).
    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_all(x, None).0.pop().expect("at least one layer")
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_len(),
                x.len()
            )));
        }
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict(view).into_raw_vec_and_offset().0)
    }

    /// Loss and parameter gradients on a batch, in layer order.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        loss: LossKind,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, Vec<(Array2<f64>, Array1<f64>)>)> {
        let (acts, masks) = self.forward_all(x, dropout);
        let out = acts.last().expect("output");
        let target: Vec<f64> = y.iter().copied().collect();
        let output: Vec<f64> = out.iter().copied().collect();
        let value = msle(&target, &output, loss)?;
        let mut delta = Array2::zeros(out.raw_dim());
        let n = out.len() as f64;
        for ((d, &o), &t) in delta.iter_mut().zip(out.iter()).zip(y.iter()) {
            *d = msle_gradient(t, o, loss) / n;
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let a = &acts[i + 1];
            let mut dz = delta;
            match &masks[i] {
                Some(m) => ndarray::Zip::from(&mut dz).and(a).and(m).for_each(|g, &av, &k| {
                    *g *= if k == 0.0 { 0.0 } else { k * layer.activation.derivative_from_output(av / k) };
                }),
                None => dz.zip_mut_with(a, |g, &av| *g *= layer.activation.derivative_from_output(av)),
            }
            let gw = acts[i].t().dot(&dz);
            let gb = dz.sum_axis(Axis(0));
            delta = dz.dot(&layer.weights.t());
            grads.push((gw, gb));
        }
        grads.reverse();
        Ok((value, grads))
    }
}

/// Which logarithmic error to use. Inputs are shifted by 2 so the `[-1, 1]`
/// state range maps to `[1, 3]` inside the logarithm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Mean of `(ln(t + 2) - ln(o + 2))^2`.
    LogDifference,
    /// Mean of `(ln(t + 2) / ln(o + 2))^2`; equals 1 wherever `o == t`.
    Ratio,
}

const SHIFT: f64 = 2.0;

fn checked_log(v: f64, what: &str) -> Result<f64> {
    if !(v + SHIFT > 0.0) {
        return Err(Error::Domain(format!("log of non-positive argument: {what} = {v}")));
    }
    Ok((v + SHIFT).ln())
}

pub fn msle(target: &[f64], output: &[f64], kind: LossKind) -> Result<f64> {
    if target.len() != output.len() || target.is_empty() {
        return Err(Error::Dimension(format!(
            "{} targets vs {} outputs",
            target.len(),
            output.len()
        )));
    }
    let mut sum = 0.0;
    for (&t, &o) in target.iter().zip(output) {
        let (lt, lo) = (checked_log(t, "target")?, checked_log(o, "output")?);
        sum += match kind {
            LossKind::LogDifference => (lt - lo).powi(2),
            LossKind::Ratio => {
                if lo == 0.0 {
                    return Err(Error::Domain(format!("ratio loss undefined for output {o}")));
                }
                (lt / lo).powi(2)
            }
        };
    }
    Ok(sum / target.len() as f64)
}

/// Derivative of one summand of [`msle`] with respect to the output.
pub fn msle_gradient(target: f64, output: f64, kind: LossKind) -> f64 {
    let lt = (target + SHIFT).ln();
    let lo = (output + SHIFT).ln();
    match kind {
        LossKind::LogDifference => -2.0 * (lt - lo) / (output + SHIFT),
        LossKind::Ratio => -2.0 * lt * lt / (lo * lo * lo * (output + SHIFT)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden_layers: usize,
    pub hidden_neurons: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub loss: LossKind,
    pub validation_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            hidden_neurons: 214,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Tanh,
            dropout: 0.05,
            batch_size: 2048,
            learning_rate: 0.01,
            optimizer: Optimizer::Sgd { momentum: 0.0 },
            loss: LossKind::LogDifference,
            validation_fraction: 0.05,
            patience: 5,
            max_epochs: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return arg("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.hidden_neurons == 0 || self.max_epochs == 0 {
            return arg("batch size, hidden neurons and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return arg("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return arg("validation fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub model: Mlp,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct OptimizerState {
    first: Vec<(Array2<f64>, Array1<f64>)>,
    second: Vec<(Array2<f64>, Array1<f64>)>,
    steps: i32,
}

impl OptimizerState {
    fn new(model: &Mlp) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    fn step(&mut self, model: &mut Mlp, grads: &[(Array2<f64>, Array1<f64>)], lr: f64, opt: Optimizer) {
        self.steps += 1;
        for (i, (gw, gb)) in grads.iter().enumerate() {
            let layer = &mut model.layers[i];
            match opt {
                Optimizer::Sgd { momentum } => {
                    if momentum == 0.0 {
                        layer.weights.scaled_add(-lr, gw);
                        layer.bias.scaled_add(-lr, gb);
                    } else {
                        let (vw, vb) = &mut self.first[i];
                        vw.zip_mut_with(gw, |v, g| *v = momentum * *v + g);
                        vb.zip_mut_with(gb, |v, g| *v = momentum * *v + g);
                        layer.weights.scaled_add(-lr, vw);
                        layer.bias.scaled_add(-lr, vb);
                    }
                }
                Optimizer::Adam { beta1, beta2, epsilon } => {
                    let c1 = 1.0 - beta1.powi(self.steps);
                    let c2 = 1.0 - beta2.powi(self.steps);
                    let (mw, mb) = &mut self.first[i];
                    let (sw, sb) = &mut self.second[i];
                    mw.zip_mut_with(gw, |m, g| *m = beta1 * *m + (1.0 - beta1) * g);
                    mb.zip_mut_with(gb, |m, g| *m = beta1 * *m + (1.0 - beta1) * g);
                    sw.zip_mut_with(gw, |s, g| *s = beta2 * *s + (1.0 - beta2) * g * g);
                    sb.zip_mut_with(gb, |s, g| *s = beta2 * *s + (1.0 - beta2) * g * g);
                    ndarray::Zip::from(&mut layer.weights).and(&*mw).and(&*sw).for_each(|w, m, s| {
                        *w -= lr * (m / c1) / ((s / c2).sqrt() + epsilon);
                    });
                    ndarray::Zip::from(&mut layer.bias).and(&*mb).and(&*sb).for_each(|b, m, s| {
                        *b -= lr * (m / c1) / ((s / c2).sqrt() + epsilon);
                    });
                }
            }
        }
    }
}

/// Mean loss over `x` in chunks (inference mode).
pub fn evaluate_loss(model: &Mlp, x: ArrayView2<f64>, y: ArrayView2<f64>, loss: LossKind) -> Result<f64> {
    let mut total = 0.0;
    let chunk = 4096;
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + chunk).min(x.nrows());
        let out = model.predict(x.slice(ndarray::s![start..end, ..]));
        let target: Vec<f64> = y.slice(ndarray::s![start..end, ..]).iter().copied().collect();
        let output: Vec<f64> = out.iter().copied().collect();
        total += msle(&target, &output, loss)? * target.len() as f64;
        start = end;
    }
    Ok(total / (x.nrows() * y.ncols()) as f64)
}

/// Trains a fresh network on `(inputs, targets)`.
///
/// A seeded shuffle holds out `validation_fraction` of the rows. After each
/// epoch the validation loss is computed without dropout; training stops
/// once it has not improved for `patience` epochs and the best weights are
/// returned.
pub fn train(inputs: &Array2<f64>, targets: &Array2<f64>, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.nrows() != targets.nrows() || inputs.nrows() == 0 {
        return Err(Error::Training(format!(
            "{} input rows vs {} target rows",
            inputs.nrows(),
            targets.nrows()
        )));
    }
    let mut sizes = vec![inputs.ncols()];
    sizes.extend(std::iter::repeat_n(cfg.hidden_neurons, cfg.hidden_layers));
    sizes.push(targets.ncols());
    let mut model = Mlp::new(&sizes, cfg.hidden_activation, cfg.output_activation, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EA1);
    let mut order: Vec<usize> = (0..inputs.nrows()).collect();
    order.shuffle(&mut rng);
    let n_val = ((inputs.nrows() as f64 * cfg.validation_fraction).round() as usize).min(inputs.nrows() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let (x_val, y_val) = if n_val > 0 {
        (inputs.select(Axis(0), val_idx), targets.select(Axis(0), val_idx))
    } else {
        (inputs.select(Axis(0), &train_idx), targets.select(Axis(0), &train_idx))
    };

    let mut state = OptimizerState::new(&model);
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0.0;
        for (b, batch) in train_idx.chunks(cfg.batch_size).enumerate() {
            let xb = inputs.select(Axis(0), batch);
            let yb = targets.select(Axis(0), batch);
            let (loss, grads) =
                model.loss_and_gradients(xb.view(), yb.view(), cfg.loss, Some((cfg.dropout, &mut rng)))?;
            if !loss.is_finite() || grads.iter().any(|(w, _)| w.iter().any(|v| !v.is_finite())) {
                return Err(Error::Training(format!(
                    "non-finite loss or gradient in epoch {epoch}, batch {b} (loss {loss}, learning rate {})",
                    cfg.learning_rate
                )));
            }
            sum += loss * batch.len() as f64;
            count += batch.len() as f64;
            state.step(&mut model, &grads, cfg.learning_rate, cfg.optimizer);
        }
        let val = evaluate_loss(&model, x_val.view(), y_val.view(), cfg.loss)?;
        if !val.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss in epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            train_loss: sum / count,
            validation_loss: val,
        });
        log::debug!("epoch {epoch}: train {:.6e}, validation {val:.6e}", sum / count);
        if val < best.0 {
            best = (val, model.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.1,
        log,
        best_epoch: best.2,
        stopped_early,
    })
}

pub fn write_training_log<W: std::io::Write>(log: &[EpochLog], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msle_floor_and_domain() {
        let t = [0.3, -0.5, 0.9];
        assert_eq!(msle(&t, &t, LossKind::Ratio).unwrap(), 1.0);
        assert_eq!(msle(&t, &t, LossKind::LogDifference).unwrap(), 0.0);
        assert_eq!(msle(&[0.0; 4], &[0.0; 4], LossKind::Ratio).unwrap(), 1.0);
        assert!(matches!(msle(&[0.0], &[-1.0], LossKind::Ratio), Err(Error::Domain(_))));
        assert!(matches!(msle(&[-2.5], &[0.0], LossKind::LogDifference), Err(Error::Domain(_))));
    }

    #[test]
    fn msle_grows_away_from_target() {
        let mut prev = msle(&[0.8], &[0.8], LossKind::Ratio).unwrap();
        for o in [0.4, 0.2, 0.1, 0.05] {
            let l = msle(&[0.8], &[o], LossKind::Ratio).unwrap();
            assert!(l > prev);
            prev = l;
        }
        let mut prev = 0.0;
        for o in [0.4, 0.8, 1.6] {
            let l = msle(&[0.2], &[o], LossKind::LogDifference).unwrap();
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = Mlp::new(&[5, 7, 6, 4], Activation::Relu, Activation::Tanh, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_simple_fn((8, 5), || rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_simple_fn((8, 4), || rng.random_range(-0.9..0.9));
        for loss in [LossKind::LogDifference, LossKind::Ratio] {
            let (_, grads) = model.loss_and_gradients(x.view(), y.view(), loss, None).unwrap();
            let h = 1e-6;
            for (layer, r, c) in [(0, 0, 0), (0, 4, 6), (1, 3, 2), (1, 6, 5), (2, 0, 3), (2, 5, 1), (0, 2, 3), (1, 1, 1), (2, 2, 2), (2, 4, 0)] {
                let mut plus = model.clone();
                plus.layers[layer].weights[[r, c]] += h;
                let mut minus = model.clone();
                minus.layers[layer].weights[[r, c]] -= h;
                let fp = evaluate_loss(&plus, x.view(), y.view(), loss).unwrap();
                let fm = evaluate_loss(&minus, x.view(), y.view(), loss).unwrap();
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads[layer].0[[r, c]];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-4, "{loss:?} layer {layer} ({r},{c}): {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, 1).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: Mlp = serde_json::from_str(&json).unwrap();
        assert_eq!(model, back);
        assert!(serde_json::from_str::<Mlp>(&json.replace("[3,4,2]", "[3,5,2]")).is_err());
    }

    #[test]
    fn learns_identity_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((512, 6), || if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let y = x.slice(ndarray::s![.., 0..3]).to_owned();
        let cfg = TrainConfig {
            hidden_neurons: 32,
            batch_size: 64,
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 },
            learning_rate: 0.005,
            max_epochs: 200,
            patience: 20,
            ..Default::default()
        };
        let out = train(&x, &y, &cfg, 3).unwrap();
        let final_loss = evaluate_loss(&out.model, x.view(), y.view(), LossKind::LogDifference).unwrap();
        assert!(final_loss < 1e-3, "loss {final_loss}");
    }

    #[test]
    fn early_stopping_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Pure noise: validation loss stops improving quickly.
        let x = Array2::from_shape_simple_fn((200, 4), || rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_simple_fn((200, 2), || rng.random_range(-0.5..0.5));
        let cfg = TrainConfig {
            hidden_neurons: 16,
            batch_size: 16,
            validation_fraction: 0.2,
            patience: 3,
            max_epochs: 500,
            ..Default::default()
        };
        let out = train(&x, &y, &cfg, 1).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.log.len(), out.best_epoch + cfg.patience);
        let best = out.log.iter().map(|e| e.validation_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.log[out.best_epoch - 1].validation_loss, best);
    }
}
