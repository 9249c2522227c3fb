//! Finite-difference oracles shared by the gradient tests and the acceptance
//! suite. Autodiff runs in `T`; the oracle always runs in `f64`.

use ofa_core::{Key, OfaNet, Scalar, Tape, Tensor, TensorError, Var};

use super::{as_f64, builtin, fd_grad, rand_tensor, rel_err_floor, tiny_model};

pub const EPS: f64 = 1e-5;

pub type UnOp<T> = Box<dyn for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>, TensorError>>;
pub type BinOp<T> = Box<dyn for<'t> Fn(Var<'t, T>, Var<'t, T>) -> Result<Var<'t, T>, TensorError>>;

/// Pins a closure to the higher-ranked signature the checkers expect.
pub fn unary<T: Scalar, F>(f: F) -> F
where
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>, TensorError>,
{
    f
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// element contributes a distinct amount.
pub fn weighted_sum<'t, T: Scalar>(tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    if y.shape().is_empty() {
        return Ok(y);
    }
    let w = tape.constant(rand_tensor::<f64>(&y.shape(), 977).cast::<T>());
    y.mul(&w)?.sum()
}

/// Relative errors of autodiff gradients in `T` against the `f64` oracle,
/// one per input.
pub fn check_op<T: Scalar>(
    inputs: &[Tensor<f64>],
    op_t: &dyn for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>, TensorError>,
    op_64: &dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
    floor: f64,
) -> Vec<f64> {
    let tape = Tape::<T>::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|x| tape.leaf(x.cast::<T>(), true)).collect();
    let loss = weighted_sum(&tape, op_t(&vars).unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let value = |xs: &[Tensor<f64>]| {
        let tape = Tape::<f64>::no_grad();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        weighted_sum(&tape, op_64(&vars).unwrap()).unwrap().value().item().unwrap()
    };
    (0..inputs.len())
        .map(|i| {
            let fd = fd_grad(&inputs[i], EPS, |xp| {
                let mut xs = inputs.to_vec();
                xs[i] = xp.clone();
                value(&xs)
            });
            rel_err_floor(&as_f64(grads.wrt(&vars[i]).unwrap()), &fd, floor)
        })
        .collect()
}

type AnyOp<T> = Box<dyn for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>, TensorError>>;

fn un<T: Scalar>(f: impl for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>, TensorError> + 'static) -> AnyOp<T> {
    Box::new(move |v| f(v[0]))
}

fn bin<T: Scalar>(f: impl for<'t> Fn(Var<'t, T>, Var<'t, T>) -> Result<Var<'t, T>, TensorError> + 'static) -> AnyOp<T> {
    Box::new(move |v| f(v[0], v[1]))
}

/// Every differentiable op with input shapes.
pub fn op_suite<T: Scalar>() -> Vec<(&'static str, Vec<Vec<usize>>, AnyOp<T>)> {
    let half = T::from_f64(0.5);
    vec![
        ("matmul", vec![vec![5, 7], vec![7, 3]], bin(|a, b| a.matmul(&b))),
        ("batched matmul", vec![vec![2, 3, 5], vec![2, 5, 4]], bin(|a, b| a.matmul(&b))),
        ("add", vec![vec![3, 4], vec![3, 4]], bin(|a, b| a.add(&b))),
        ("sub", vec![vec![3, 4], vec![3, 4]], bin(|a, b| a.sub(&b))),
        ("mul", vec![vec![2, 3, 2], vec![2, 3, 2]], bin(|a, b| a.mul(&b))),
        ("add_row", vec![vec![2, 3, 4], vec![4]], bin(|a, b| a.add_row(&b))),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], bin(|a, b| a.concat_rows(&b))),
        ("mse", vec![vec![3, 5], vec![3, 5]], bin(|a, b| a.mse(&b))),
        ("scale", vec![vec![3, 4]], un(move |x| x.scale(-half - half - half))),
        ("permute", vec![vec![2, 3, 4]], un(|x| x.permute(&[2, 0, 1]))),
        ("transpose", vec![vec![2, 3, 5]], un(|x| x.transpose())),
        ("reshape", vec![vec![2, 6]], un(|x| x.reshape(&[3, 4]))),
        ("gather_rows", vec![vec![5, 3]], un(|x| x.gather_rows(&[4, 0, 4, 2, 2, 2]))),
        ("softmax", vec![vec![4]], un(|x| x.softmax(0))),
        ("softmax rows", vec![vec![3, 5]], un(|x| x.softmax(1))),
        ("softmax inner axis", vec![vec![2, 4, 3]], un(|x| x.softmax(1))),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|v| v[0].layernorm(&v[1], &v[2], T::from_f64(1e-5)))),
        ("gelu", vec![vec![4, 5]], un(|x| x.gelu())),
        ("sum", vec![vec![3, 4]], un(|x| x.sum())),
        ("mean", vec![vec![3, 4]], un(|x| x.mean())),
        ("mean_axis", vec![vec![3, 4, 2]], un(|x| x.mean_axis(1))),
        ("attention graph", vec![vec![4, 3]], un(move |x| {
            let s = x.matmul(&x.transpose()?)?.scale(half)?.softmax(1)?;
            s.matmul(&x)?.gelu()?.add(&x)
        })),
    ]
}

/// Worst relative error per op, autodiff in `T`.
pub fn op_errors<T: Scalar>(floor: f64) -> Vec<(&'static str, f64)> {
    op_suite::<T>()
        .into_iter()
        .zip(op_suite::<f64>())
        .enumerate()
        .map(|(i, ((name, shapes, op_t), (_, _, op_64)))| {
            let inputs: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(j, s)| rand_tensor(s, 100 * i as u64 + j as u64)).collect();
            let worst = check_op::<T>(&inputs, op_t.as_ref(), op_64.as_ref(), floor).into_iter().fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// mim loss of a net on one sample under a fixed mask.
pub fn net_loss<'t, T: Scalar>(net: &OfaNet<T>, image: &Tensor<T>, modality: &str, tape: &'t Tape<T>) -> Result<Var<'t, T>, ofa_core::ModelError> {
    net.mim_forward(tape, std::slice::from_ref(image), modality, 0.75, Key::new(5).str("mask"))
}

/// Central differences over every scalar parameter, by name.
pub fn fd_all_params(net: &OfaNet<f64>, image: &Tensor<f64>, modality: &str) -> Vec<(String, Vec<f64>)> {
    let mut work = net.clone();
    net.named_params()
        .into_iter()
        .map(|(name, t)| {
            let g = fd_grad(&t, EPS, |perturbed| {
                work.visit_params_mut(&mut |n, p| {
                    if n == name {
                        *p = perturbed.clone();
                    }
                });
                net_loss(&work, image, modality, &Tape::no_grad()).unwrap().value().item().unwrap()
            });
            work.visit_params_mut(&mut |n, p| {
                if n == name {
                    *p = t.clone();
                }
            });
            (name, g)
        })
        .collect()
}

pub fn autodiff_all_params<T: Scalar>(net: &OfaNet<T>, image: &Tensor<T>, modality: &str) -> Vec<(String, Vec<f64>)> {
    let tape = Tape::new();
    let loss = net_loss(net, image, modality, &tape).unwrap();
    let grads = tape.backward(loss).unwrap();
    net.named_params()
        .into_iter()
        .map(|(name, t)| {
            let g = grads.of(&t).map(as_f64).unwrap_or_else(|| vec![0.0; t.numel()]);
            (name, g)
        })
        .collect()
}

/// Per-tensor errors for the 2-block, width-16 net on one 16x16 sentinel1
/// sample: `(name, f64 error, f32 error, oracle gradient vanishes)`.
pub fn tiny_net_errors() -> Vec<(String, f64, f64, bool)> {
    let spec = builtin("sentinel1");
    let net = OfaNet::<f64>::new(tiny_model(), &[spec.clone()], 17).unwrap();
    let image = ofa_core::SynthGenerator::new(16).pretrain_sample(&spec, 4, 0).image.cast::<f64>();
    let fd = fd_all_params(&net, &image, "sentinel1");
    let auto64 = autodiff_all_params(&net, &image, "sentinel1");
    let auto32 = autodiff_all_params(&net.cast::<f32>(), &image.cast::<f32>(), "sentinel1");
    fd.into_iter()
        .zip(auto64.into_iter().zip(auto32))
        .map(|((name, f), ((_, a64), (_, a32)))| {
            // zero-gradient tensors are compared absolutely through the floor
            let e64 = rel_err_floor(&a64, &f, 1e-6);
            let e32 = rel_err_floor(&a32, &f, 1e-4);
            let vanishes = f.iter().all(|v| v.abs() < 1e-8);
            (name, e64, e32, vanishes)
        })
        .collect()
}
