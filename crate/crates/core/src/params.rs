//! Named parameter tensors and their binding onto a graph.

use std::collections::HashMap;

use mshvit_tensor::nn::{AttentionVars, BlockVars, MlpVars};
use mshvit_tensor::{Element, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal(f64),
    /// `N(0, 2 / fan_in)`.
    Kaiming { fan_in: usize },
}

impl Init {
    pub fn sample(self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0, std).expect("std must be finite");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = d.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Kaiming { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("fan_in must be positive");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

/// Ordered name → tensor table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Initializes every spec in order from `rng`.
    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut set = Self::new();
        for s in specs {
            let n = s.shape.iter().product();
            let data = s.init.sample(n, rng);
            set.insert(&s.name, Tensor::from_f64(s.shape.clone(), &data).expect("spec shape matches"));
        }
        set
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.to_string(), self.names.len());
            self.names.push(name.to_string());
            self.tensors.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Checks that the names and shapes match `specs` exactly.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        let missing: Vec<String> = specs
            .iter()
            .filter(|s| self.get(&s.name).is_none())
            .map(|s| s.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(CoreError::MissingTensors(missing));
        }
        for s in specs {
            let have = self.get(&s.name).unwrap().shape();
            if have != s.shape.as_slice() {
                return Err(CoreError::Config(format!("tensor {} has shape {:?}, expected {:?}", s.name, have, s.shape)));
            }
        }
        if self.len() != specs.len() {
            let extra: Vec<&str> = self
                .names
                .iter()
                .filter(|n| !specs.iter().any(|s| &s.name == *n))
                .map(String::as_str)
                .collect();
            return Err(CoreError::Config(format!("unexpected tensors: {}", extra.join(", "))));
        }
        Ok(())
    }

    /// Places every tensor on `g`, as parameters when `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Names this set's tensors with vars already on a graph, one per tensor in order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.len() {
            return Err(CoreError::Argument(format!("{} vars for {} tensors", vars.len(), self.len())));
        }
        Ok(Bound {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }
}

/// Graph handles for a bound [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| CoreError::MissingTensors(vec![name.to_string()]))
    }
}

/// Parameter specs of one pre-norm encoder block under `prefix`.
pub fn block_specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
    let w = Init::TruncNormal(0.02);
    let mut v = vec![spec(format!("{prefix}.ln1.g"), &[d], Init::Ones), spec(format!("{prefix}.ln1.b"), &[d], Init::Zeros)];
    for p in ["q", "k", "v", "o"] {
        v.push(spec(format!("{prefix}.attn.w{p}"), &[d, d], w));
        v.push(spec(format!("{prefix}.attn.b{p}"), &[d], Init::Zeros));
    }
    v.extend([
        spec(format!("{prefix}.ln2.g"), &[d], Init::Ones),
        spec(format!("{prefix}.ln2.b"), &[d], Init::Zeros),
        spec(format!("{prefix}.mlp.w1"), &[d, hidden], w),
        spec(format!("{prefix}.mlp.b1"), &[hidden], Init::Zeros),
        spec(format!("{prefix}.mlp.w2"), &[hidden, d], w),
        spec(format!("{prefix}.mlp.b2"), &[d], Init::Zeros),
    ]);
    v
}

pub fn block_vars(b: &Bound, prefix: &str) -> Result<BlockVars> {
    let v = |s: &str| b.get(&format!("{prefix}.{s}"));
    Ok(BlockVars {
        ln1_g: v("ln1.g")?,
        ln1_b: v("ln1.b")?,
        attn: AttentionVars {
            wq: v("attn.wq")?,
            bq: v("attn.bq")?,
            wk: v("attn.wk")?,
            bk: v("attn.bk")?,
            wv: v("attn.wv")?,
            bv: v("attn.bv")?,
            wo: v("attn.wo")?,
            bo: v("attn.bo")?,
        },
        ln2_g: v("ln2.g")?,
        ln2_b: v("ln2.b")?,
        mlp: MlpVars {
            w1: v("mlp.w1")?,
            b1: v("mlp.b1")?,
            w2: v("mlp.w2")?,
            b2: v("mlp.b2")?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let v = Init::TruncNormal(0.02).sample(10_000, &mut rng);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn check_reports_missing_names() {
        let specs = vec![spec("a", &[2], Init::Zeros), spec("b", &[3], Init::Zeros)];
        let mut set = ParamSet::<f32>::new();
        set.insert("a", Tensor::zeros([2]));
        match set.check_against(&specs) {
            Err(CoreError::MissingTensors(m)) => assert_eq!(m, vec!["b".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
