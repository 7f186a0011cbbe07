use crate::registry::{Arch, ModelAssembly, ModelDims, ModuleVariant};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::ParamMap;

// initial box bias: z centre, then softplus⁻¹ of a 1.5 m extent
const INIT_Z: f64 = 0.75;
const INIT_EXTENT: f64 = 1.5;

fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Offsets of `n` sampling points spread on a unit ring, rotated off the
/// grid axes so initial samples avoid integer coordinates.
fn ring(n: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|k| {
            let a = std::f64::consts::TAU * (k as f64 + 0.5) / n as f64;
            [a.cos(), a.sin()]
        })
        .collect()
}

/// Parameters of one variant. Every tensor draws from a stream derived from
/// `(seed, key)`, so a module initializes identically in every assembly.
pub fn init_variant(v: &ModuleVariant, dims: &ModelDims, seed: u64) -> ParamMap {
    let mut out = ParamMap::new();
    for (key, shape) in v.param_shapes(dims) {
        let mut rng = Rng::derive(seed, &key);
        let n: usize = shape.iter().product();
        let name = key.rsplit('/').next().expect("key has a name");
        let data: Vec<f64> = match name {
            "bev-queries" => (0..n).map(|_| 0.1 * rng.normal()).collect(),
            "object-queries" => (0..n).map(|_| rng.normal()).collect(),
            "offset.w" | "attn.w" => vec![0.0; n],
            "offset.b" => {
                let n_key = match v.arch {
                    Arch::Sca { n_key } | Arch::Tsa { n_key } => n_key,
                    _ => unreachable!("offsets belong to deformable modules"),
                };
                ring(n_key).into_iter().cycle().take(n).collect()
            }
            "cls.b" => {
                // background prior of 0.9 spread over the foreground classes
                let mut b = vec![0.0; n];
                b[n - 1] = (9.0 * (n - 1) as f64).ln();
                b
            }
            "box.b" => {
                let s = softplus_inv(INIT_EXTENT);
                vec![0.0, 0.0, INIT_Z, s, s, s]
            }
            _ if name.ends_with(".b") => vec![0.0; n],
            _ => {
                let (fan_in, fan_out) = (shape[0], shape[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.uniform(-bound, bound)).collect()
            }
        };
        let data = data.into_iter().map(|x| x as f32).collect();
        out.insert(key, Tensor::new(shape, data).expect("init shape"));
    }
    out
}

pub fn init_params(assembly: &ModelAssembly, dims: &ModelDims, seed: u64) -> ParamMap {
    assembly
        .variants()
        .iter()
        .flat_map(|v| init_variant(v, dims, seed))
        .collect()
}
