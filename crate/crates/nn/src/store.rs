//! Variable storage with reproducible initialization.
//!
//! Each variable is initialized from its own ChaCha stream keyed by
//! `(seed, name)`, so values do not depend on construction order or on
//! candle's global RNG.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use accent_core::seed;
use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone)]
pub struct SeededVarStore {
    seed: u64,
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
}

impl SeededVarStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            vars: Arc::new(Mutex::new(BTreeMap::new())),
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// All variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let vars = self.vars.lock().expect("var store lock");
        vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("var store lock").get(name).cloned()
    }
}

fn init_values(shape: &Shape, init: Init, rng: &mut impl Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let uniform = |rng: &mut dyn rand::RngCore, lo: f64, up: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..up)).collect()
    };
    let normal = |rng: &mut dyn rand::RngCore, mean: f64, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    match init {
        Init::Const(c) => vec![c; n],
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
                NormalOrUniform::Normal => normal(rng, 0.0, std),
            }
        }
    }
}

impl SimpleBackend for SeededVarStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut vars = self.vars.lock().expect("var store lock");
        if let Some(v) = vars.get(name) {
            if v.shape() != &s {
                candle_core::bail!("variable {name} has shape {:?}, requested {:?}", v.shape(), s);
            }
            return Ok(v.as_tensor().clone());
        }
        let mut rng = seed::rng(self.seed, "nn.init", &[name.as_bytes()]);
        let values = init_values(&s, h, &mut rng);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> Result<Tensor> {
        match self.vars.lock().expect("var store lock").get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("unknown variable {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().expect("var store lock").contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_independent_init() {
        let a = SeededVarStore::new(3);
        let b = SeededVarStore::new(3);
        let dev = Device::Cpu;
        let init = Init::Randn { mean: 0.0, stdev: 1.0 };
        let va = a.var_builder(DType::F32, &dev);
        let vb = b.var_builder(DType::F32, &dev);
        let x1 = va.get_with_hints(4, "x", init).unwrap();
        let _ = va.get_with_hints(4, "y", init).unwrap();
        let _ = vb.get_with_hints(4, "y", init).unwrap();
        let x2 = vb.get_with_hints(4, "x", init).unwrap();
        assert_eq!(x1.to_vec1::<f32>().unwrap(), x2.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn repeated_get_shares_storage() {
        let s = SeededVarStore::new(0);
        let vb = s.var_builder(DType::F32, &Device::Cpu);
        let t = vb.get_with_hints(2, "w", Init::Const(1.0)).unwrap();
        s.get("w").unwrap().set(&Tensor::new(&[5f32, 6.], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(t.to_vec1::<f32>().unwrap(), vec![5.0, 6.0]);
        assert!(vb.get_with_hints(3, "w", Init::Const(1.0)).is_err());
    }
}
