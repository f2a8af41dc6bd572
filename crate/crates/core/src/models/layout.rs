use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelKind};
use crate::tensor::{BnState, Element, Tensor};

/// Named tensors in a fixed order.
#[derive(Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

impl<T: Element> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.iter().map(|(n, t)| (n, t.shape()))).finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Bn {
    pub gamma: usize,
    pub beta: usize,
    pub state: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EncoderBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub bn: Option<Bn>,
    pub transition: Option<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DecoderBlock {
    /// Transposed conv from the next coarser scale; absent at the bottom.
    pub up: Option<usize>,
    pub conv1: Conv,
    pub conv2: Conv,
    pub bn: Option<Bn>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layout {
    Dcfpn {
        encoder: Vec<EncoderBlock>,
        /// Indexed by scale - 1.
        decoder: Vec<DecoderBlock>,
        head: Conv,
    },
    Baseline {
        stages: Vec<Vec<(Conv, Bn)>>,
        head: Conv,
    },
}

impl Layout {
    pub fn conv_layers(&self) -> usize {
        match self {
            Layout::Dcfpn { encoder, decoder, .. } => {
                encoder.iter().map(|e| 2 + usize::from(e.transition.is_some())).sum::<usize>()
                    + decoder.iter().map(|d| 2 + usize::from(d.up.is_some())).sum::<usize>()
            }
            Layout::Baseline { stages, .. } => stages.iter().map(Vec::len).sum(),
        }
    }

    pub fn head(&self) -> Conv {
        match self {
            Layout::Dcfpn { head, .. } | Layout::Baseline { head, .. } => *head,
        }
    }
}

pub(crate) struct Built<T> {
    pub params: ParamStore<T>,
    pub bn: Vec<(String, BnState<T>)>,
    pub layout: Layout,
    /// Channel count at each scale's tap, indexed by scale - 1 (`None` if untapped).
    pub tap_channels: Vec<Option<usize>>,
}

struct Builder<T> {
    params: ParamStore<T>,
    bn: Vec<(String, BnState<T>)>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    fn uniform(&mut self, shape: [usize; 4], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
    }

    /// 3x3 conv with fan-in scaled uniform init for a following ReLU.
    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let fan_in = (cin * 9) as f64;
        let w = self.uniform([cout, cin, 3, 3], (6.0 / fan_in).sqrt());
        Conv {
            w: self.params.push(format!("{name}.weight"), w),
            b: self.params.push(format!("{name}.bias"), Tensor::zeros([cout])),
        }
    }

    /// 2x2 stride-2 transposed conv, `[cin, cout, 2, 2]`.
    fn deconv(&mut self, name: &str, cin: usize, cout: usize) -> usize {
        let w = self.uniform([cin, cout, 2, 2], (3.0 / cin as f64).sqrt());
        self.params.push(format!("{name}.weight"), w)
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.params.push(format!("{name}.gamma"), Tensor::full([c], T::one()));
        let beta = self.params.push(format!("{name}.beta"), Tensor::zeros([c]));
        self.bn.push((name.to_string(), BnState::new(c)));
        Bn {
            gamma,
            beta,
            state: self.bn.len() - 1,
        }
    }

    /// Classifier over pooled features, `[k, c]`.
    fn linear(&mut self, name: &str, c: usize, k: usize) -> Conv {
        let w = self.uniform([k, c, 1, 1], (3.0 / c as f64).sqrt()).reshape([k, c]).expect("same element count");
        Conv {
            w: self.params.push(format!("{name}.weight"), w),
            b: self.params.push(format!("{name}.bias"), Tensor::zeros([k])),
        }
    }
}

pub(crate) fn build<T: Element>(kind: ModelKind, cfg: &ModelConfig) -> Built<T> {
    let mut b = Builder {
        params: ParamStore::new(),
        bn: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let n = cfg.scales;
    let mut tap_channels = vec![None; n];
    let layout = match kind {
        ModelKind::Dcfpn => {
            let mut encoder = Vec::with_capacity(n);
            let mut cin = cfg.in_channels;
            for p in 1..=n {
                let w = cfg.width(p);
                let conv1 = b.conv(&format!("enc{p}.conv1"), cin, w);
                let conv2 = b.conv(&format!("enc{p}.conv2"), w, w);
                let (bn, out) = if cfg.dense {
                    (Some(b.bn(&format!("enc{p}.bn"), cin + w)), cin + w)
                } else {
                    (None, w)
                };
                let transition = (p < n).then(|| b.conv(&format!("enc{p}.transition"), out, w));
                cin = if p < n { w } else { out };
                encoder.push(EncoderBlock {
                    conv1,
                    conv2,
                    bn,
                    transition,
                });
            }
            let mut decoder: Vec<Option<DecoderBlock>> = vec![None; n];
            let mut below = cin;
            for p in (1..=n).rev() {
                let w = cfg.width(p);
                let (up, input) = if p == n {
                    (None, below)
                } else {
                    (Some(b.deconv(&format!("dec{p}.up"), below, w)), 2 * w)
                };
                let conv1 = b.conv(&format!("dec{p}.conv1"), input, w);
                let conv2 = b.conv(&format!("dec{p}.conv2"), w, w);
                let (bn, out) = if cfg.dense {
                    (Some(b.bn(&format!("dec{p}.bn"), input + w)), input + w)
                } else {
                    (None, w)
                };
                tap_channels[p - 1] = Some(out);
                below = out;
                decoder[p - 1] = Some(DecoderBlock { up, conv1, conv2, bn });
            }
            let head = b.linear("head", below, cfg.classes);
            Layout::Dcfpn {
                encoder,
                decoder: decoder.into_iter().map(|d| d.expect("every scale built")).collect(),
                head,
            }
        }
        ModelKind::Baseline => {
            let mut stages = Vec::with_capacity(n);
            let mut cin = cfg.in_channels;
            for p in 1..=n {
                let w = cfg.width(p);
                let count = if p <= n / 2 { 3 } else { 4 };
                let stage = (1..=count)
                    .map(|i| {
                        let conv = b.conv(&format!("stage{p}.conv{i}"), cin, w);
                        let bn = b.bn(&format!("stage{p}.bn{i}"), w);
                        cin = w;
                        (conv, bn)
                    })
                    .collect();
                stages.push(stage);
            }
            tap_channels[n - 1] = Some(cin);
            let head = b.linear("head", cin, cfg.classes);
            Layout::Baseline { stages, head }
        }
    };
    Built {
        params: b.params,
        bn: b.bn,
        layout,
        tap_channels,
    }
}
