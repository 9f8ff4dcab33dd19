use pimnb::nn::engine::{self, LayerGrads, LayerWeights};
use pimnb::nn::ops::softmax_cross_entropy;
use pimnb::nn::ExecMode;
use pimnb::rng::{gaussian, stream, StreamPurpose};
use pimnb::train::{loss_and_gradients_f64, loss_f64};
use pimnb::{LayerSpec, Model};

const H: f64 = 1e-3;

/// Conv (with and without bias), BN on rank-4 and rank-2 inputs, ReLU,
/// MaxPool, GAP, Flatten and Linear.
pub fn nets_pub() -> Vec<(Vec<LayerSpec>, Vec<usize>)> { nets() }
fn nets() -> Vec<(Vec<LayerSpec>, Vec<usize>)> {
    vec![
        (
            vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, padding: 1, has_bias: true },
                LayerSpec::BatchNorm2d { channels: 2, epsilon: 1e-5 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
                LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, padding: 1, has_bias: false },
                LayerSpec::BatchNorm2d { channels: 3, epsilon: 1e-5 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Flatten,
                LayerSpec::Linear { in_dim: 3, out_dim: 3, has_bias: true },
            ],
            vec![8, 1, 6, 6],
        ),
        (
            vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 2, kernel: 3, stride: 2, padding: 1, has_bias: true },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear { in_dim: 18, out_dim: 5, has_bias: true },
                LayerSpec::BatchNorm2d { channels: 5, epsilon: 1e-5 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_dim: 5, out_dim: 3, has_bias: false },
            ],
            vec![8, 2, 5, 5],
        ),
    ]
}

fn random_input(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut r = stream(seed, StreamPurpose::Synthetic, 0);
    (0..shape.iter().product::<usize>()).map(|_| gaussian(&mut r, 0.0, 1.0)).collect()
}

/// Randomizes BN affine parameters so the check does not sit at gamma=1, beta=0.
fn perturb_norms(weights: &mut [LayerWeights<f64>], seed: u64) {
    let mut r = stream(seed, StreamPurpose::Synthetic, 1);
    for w in weights {
        if let LayerWeights::Norm(n) = w {
            n.gamma.iter_mut().for_each(|g| *g = gaussian(&mut r, 1.0, 0.3));
            n.beta.iter_mut().for_each(|b| *b = gaussian(&mut r, 0.0, 0.3));
        }
    }
}

/// Mutable references to every scalar parameter, in a fixed order.
fn coords(weights: &mut [LayerWeights<f64>]) -> Vec<&mut f64> {
    let mut out = Vec::new();
    for w in weights {
        match w {
            LayerWeights::Affine { weight, bias } => {
                out.extend(weight.iter_mut());
                if let Some(b) = bias {
                    out.extend(b.iter_mut());
                }
            }
            LayerWeights::Norm(n) => {
                out.extend(n.gamma.iter_mut());
                out.extend(n.beta.iter_mut());
            }
            LayerWeights::None => {}
        }
    }
    out
}

fn flat_grads(grads: &[LayerGrads<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        match g {
            LayerGrads::Affine { weight, bias } => {
                out.extend(weight);
                if let Some(b) = bias {
                    out.extend(b);
                }
            }
            LayerGrads::Norm { gamma, beta } => {
                out.extend(gamma);
                out.extend(beta);
            }
            LayerGrads::None => {}
        }
    }
    out
}

/// Which linear piece the network is on: the sign of every ReLU input and the
/// argmax of every max-pool window.
fn piece(layers: &[LayerSpec], weights: &[LayerWeights<f64>], x: &[f64], shape: &[usize]) -> (f64, Vec<usize>) {
    let all: Vec<usize> = (0..layers.len()).collect();
    let out = engine::run(layers, weights, x.to_vec(), shape, ExecMode::Train, &all, false).unwrap();
    let labels: Vec<usize> = (0..shape[0]).map(|i| i % out.shape[1]).collect();
    let loss = softmax_cross_entropy(&out.output, out.shape[0], out.shape[1], &labels).0;
    let mut sig = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let (in_shape, input) = if i == 0 { (shape.to_vec(), x.to_vec()) } else { out.traced[&(i - 1)].clone() };
        match layer {
            LayerSpec::Relu => sig.extend(input.iter().map(|&v| usize::from(v > 0.0))),
            LayerSpec::MaxPool2d { kernel, stride } => {
                let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
                let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let window = (0..kernel * kernel).map(|k| p * h * w + (oy * stride + k / kernel) * w + ox * stride + k % kernel);
                            sig.push(window.fold(usize::MAX, |best, j| if best == usize::MAX || input[j] > input[best] { j } else { best }));
                        }
                    }
                }
            }
            _ => {}
        }
    }
    (loss, sig)
}

pub struct Check {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose +-H stencil crosses a ReLU or max-pool kink.
    pub skipped: usize,
    /// Largest error(H / 10) / error(H) among coordinates above 1e-4 at H.
    pub refined: f64,
}

/// Largest relative error between the analytic gradient and a central
/// difference, over coordinates whose gradient exceeds 1e-6. A central
/// difference is only an oracle where the loss is smooth across the stencil,
/// so coordinates whose perturbation changes the ReLU / max-pool pattern are
/// counted separately instead of compared.
pub fn max_relative_error(layers: &[LayerSpec], shape: &[usize], seed: u64) -> Check {
    let model = Model::init(layers.to_vec(), seed).unwrap();
    let mut weights = model.engine_weights::<f64>();
    perturb_norms(&mut weights, seed);
    let n_params: usize = coords(&mut weights).len();
    assert!(n_params <= 500, "{n_params} parameters");
    let x = random_input(shape, seed);
    let classes = match layers.last().unwrap() {
        LayerSpec::Linear { out_dim, .. } => *out_dim,
        _ => unreachable!(),
    };
    let labels: Vec<usize> = (0..shape[0]).map(|i| i % classes).collect();
    let (loss, grads) = loss_and_gradients_f64(layers, &weights, &x, shape, &labels).unwrap();
    let analytic = flat_grads(&grads);
    assert_eq!(analytic.len(), n_params);
    let (loss0, sig0) = piece(layers, &weights, &x, shape);
    assert_eq!(loss, loss0);
    assert_eq!(loss, loss_f64(layers, &weights, &x, shape, &labels, ExecMode::Train).unwrap());

    let mut c = Check { worst: 0.0, checked: 0, skipped: 0, refined: 0.0 };
    for i in 0..n_params {
        let a = analytic[i];
        if a.abs() <= 1e-6 {
            continue;
        }
        let orig = *coords(&mut weights)[i];
        let mut central = |h: f64| {
            *coords(&mut weights)[i] = orig + h;
            let (up, sig_up) = piece(layers, &weights, &x, shape);
            *coords(&mut weights)[i] = orig - h;
            let (down, sig_down) = piece(layers, &weights, &x, shape);
            *coords(&mut weights)[i] = orig;
            (sig_up == sig0 && sig_down == sig0).then(|| {
                let numeric = (up - down) / (2.0 * h);
                (a - numeric).abs() / a.abs().max(numeric.abs())
            })
        };
        match central(H) {
            None => c.skipped += 1,
            Some(e) => {
                if e > 1e-4 {
                    c.refined = c.refined.max(central(H / 10.0).map_or(f64::INFINITY, |r| r / e));
                }
                c.worst = c.worst.max(e);
                c.checked += 1;
            }
        }
    }
    c
}

#[test]
fn central_difference_matches_backprop_on_every_layer_type() {
    for (layers, shape) in nets() {
        for seed in 0..10 {
            let c = max_relative_error(&layers, &shape, seed);
            assert!(c.checked > 20 && c.skipped * 4 <= c.checked, "seed {seed}: {} checked, {} skipped", c.checked, c.skipped);
            // Above the limit only through O(h^2) truncation: a tenth of the
            // step must cut the error roughly a hundredfold.
            assert!(
                c.worst <= 1e-4 || c.refined <= 0.02,
                "seed {seed}: max relative error {:e} (refined {:e}) for {layers:?}",
                c.worst,
                c.refined
            );
        }
        let reference = max_relative_error(&layers, &shape, 11);
        assert!(reference.worst <= 1e-4, "max relative error {:e}", reference.worst);
    }
}

#[test]
fn zero_gamma_blocks_upstream_weight_gradients() {
    let layers = nets()[0].0.clone();
    let model = Model::init(layers.clone(), 3).unwrap();
    let mut weights = model.engine_weights::<f64>();
    if let LayerWeights::Norm(n) = &mut weights[5] {
        n.gamma.iter_mut().for_each(|g| *g = 0.0);
    }
    let shape = [4, 1, 6, 6];
    let x = random_input(&shape, 3);
    let (_, grads) = loss_and_gradients_f64(&layers, &weights, &x, &shape, &[0, 1, 2, 0]).unwrap();
    for idx in [0, 4] {
        let LayerGrads::Affine { weight, .. } = &grads[idx] else { panic!("layer {idx}") };
        assert!(weight.iter().all(|&g| g == 0.0), "layer {idx}");
    }
}

#[test]
fn duplicated_sample_doubles_its_contribution() {
    let layers = vec![
        LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, padding: 0, has_bias: true },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Linear { in_dim: 8, out_dim: 3, has_bias: true },
    ];
    let weights = Model::init(layers.clone(), 5).unwrap().engine_weights::<f64>();
    let a = random_input(&[1, 1, 4, 4], 1);
    let b = random_input(&[1, 1, 4, 4], 2);
    let grad = |x: &[f64], labels: &[usize]| {
        let shape = [labels.len(), 1, 4, 4];
        flat_grads(&loss_and_gradients_f64(&layers, &weights, x, &shape, labels).unwrap().1)
    };
    let ga = grad(&a, &[1]);
    let gb = grad(&b, &[2]);
    let batch: Vec<f64> = a.iter().chain(&a).chain(&b).copied().collect();
    let g = grad(&batch, &[1, 1, 2]);
    for i in 0..g.len() {
        let expected = (2.0 * ga[i] + gb[i]) / 3.0;
        assert!((g[i] - expected).abs() <= 1e-12 * expected.abs().max(1.0), "coord {i}");
    }
}

