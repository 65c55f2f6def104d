//! A [`PdcnnSpec`] instantiated with parameters: forward pass, backward
//! pass, prediction, and the `model.bin` file format.

use std::fs;
use std::path::Path;

use crate::arch::{shape_check, LayerKind, PdcnnSpec, ShapeTable};
use crate::error::{Error, Result};
use crate::kv;
use crate::layers::fc::{fc_backward, fc_forward};
use crate::layers::{lrn, lrn_backward};
use crate::layers::{relu, relu_backward, softmax_xent, Conv2d, ConvCache, LrnParams, MaxPool, PoolCache};
use crate::tensor::{decode_pdt, encode_pdt, gaussian_init, Rng, Tensor};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Weight decay applies (false for biases).
    pub decay: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Conv { weight: usize, bias: usize, op: Conv2d },
    Pool(MaxPool),
    Lrn(LrnParams),
    Relu,
}

enum Cache {
    Conv(ConvCache),
    Pool(PoolCache),
    Lrn(Tensor),
    Relu(Tensor),
}

#[derive(Clone, Debug)]
struct Branch {
    name: String,
    ops: Vec<Op>,
    /// Index of conv1's weight parameter.
    conv1: usize,
}

/// Loss, logits, and parameter gradients for one sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub logits: Tensor,
    /// One per parameter, in [`Network::params`] order.
    pub grads: Vec<Tensor>,
}

/// Suffix distinguishing the conv1 of each branch: `conv1` alone, else `conv1a`, `conv1b`, ...
pub fn branch_letter(branch: usize, branches: usize) -> String {
    if branches == 1 {
        String::new()
    } else {
        char::from(b'a' + branch as u8).to_string()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: PdcnnSpec,
    table: ShapeTable,
    params: Vec<Param>,
    branches: Vec<Branch>,
    head: (usize, usize),
}

impl Network {
    /// Builds the parameter layout with all-zero tensors.
    pub fn zeros(spec: PdcnnSpec) -> Result<Self> {
        let table = shape_check(&spec, spec.config.input)?;
        let n = spec.branches.len();
        let mut params = Vec::new();
        let mut branches = Vec::new();
        for (b, arch) in spec.branches.iter().enumerate() {
            let letter = branch_letter(b, n);
            let mut c = spec.config.input[0];
            let mut ops = Vec::new();
            let mut conv1 = None;
            for layer in arch.feature_layers() {
                let op = match layer.kind {
                    LayerKind::Conv {
                        filters,
                        kernel,
                        stride,
                        padding,
                    } => {
                        let weight = params.len();
                        conv1.get_or_insert(weight);
                        let stem = format!("{}{letter}", layer.name);
                        params.push(Param {
                            name: format!("{stem}.weight"),
                            value: Tensor::zeros(&[filters, c, kernel, kernel])?,
                            decay: true,
                        });
                        params.push(Param {
                            name: format!("{stem}.bias"),
                            value: Tensor::zeros(&[filters])?,
                            decay: false,
                        });
                        c = filters;
                        Op::Conv {
                            weight,
                            bias: weight + 1,
                            op: Conv2d { stride, padding },
                        }
                    }
                    LayerKind::MaxPool { window, stride } => Op::Pool(MaxPool { window, stride }),
                    LayerKind::Lrn(p) => Op::Lrn(p),
                    LayerKind::Relu => Op::Relu,
                    LayerKind::Fc { .. } => unreachable!("feature_layers strips the classifier"),
                };
                ops.push(op);
            }
            let conv1 = conv1.ok_or_else(|| Error::Shape(format!("branch {} has no conv layer", arch.name)))?;
            branches.push(Branch {
                name: arch.name.clone(),
                ops,
                conv1,
            });
        }
        let head = (params.len(), params.len() + 1);
        params.push(Param {
            name: "fc2.weight".into(),
            value: Tensor::zeros(&[spec.classes, table.fused])?,
            decay: true,
        });
        params.push(Param {
            name: "fc2.bias".into(),
            value: Tensor::zeros(&[spec.classes])?,
            decay: false,
        });
        Ok(Network {
            spec,
            table,
            params,
            branches,
            head,
        })
    }

    /// Gaussian(0, init_sigma²) weights and zero biases, drawn in parameter order.
    pub fn init(spec: PdcnnSpec, rng: &mut Rng) -> Result<Self> {
        let mut net = Network::zeros(spec)?;
        let sigma = net.spec.config.init_sigma;
        for p in net.params.iter_mut().filter(|p| p.decay) {
            p.value = gaussian_init(p.value.shape(), sigma, rng)?;
        }
        Ok(net)
    }

    /// Installs `values` (in parameter order) after checking every shape.
    pub fn with_params(spec: PdcnnSpec, values: Vec<Tensor>) -> Result<Self> {
        let mut net = Network::zeros(spec)?;
        net.set_values(values)?;
        Ok(net)
    }

    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} tensors given for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} expects {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn spec(&self) -> &PdcnnSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &ShapeTable {
        &self.table
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.config.input
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `(branch name, layer name, conv1 weights)` per branch.
    pub fn first_conv_weights(&self) -> Vec<(String, String, &Tensor)> {
        let n = self.branches.len();
        self.branches
            .iter()
            .enumerate()
            .map(|(i, b)| {
                (
                    b.name.clone(),
                    format!("conv1{}", branch_letter(i, n)),
                    &self.params[b.conv1].value,
                )
            })
            .collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        input.expect_shape(&self.spec.config.input)
    }

    fn run_branch(&self, b: &Branch, input: &Tensor, caches: Option<&mut Vec<Cache>>) -> Result<Tensor> {
        let mut x = input.clone();
        let mut caches = caches;
        for op in &b.ops {
            let (y, cache) = match op {
                Op::Conv { weight, bias, op } => {
                    let (y, c) = op.forward(&x, &self.params[*weight].value, &self.params[*bias].value)?;
                    (y, Cache::Conv(c))
                }
                Op::Pool(p) => {
                    let (y, c) = p.forward(&x)?;
                    (y, Cache::Pool(c))
                }
                Op::Lrn(p) => (lrn(&x, p)?, Cache::Lrn(x)),
                Op::Relu => (relu(&x), Cache::Relu(x)),
            };
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            x = y;
        }
        Ok(x)
    }

    fn fused_features(&self, input: &Tensor, mut caches: Option<&mut Vec<Vec<Cache>>>) -> Result<Tensor> {
        let mut fused = Vec::with_capacity(self.table.fused);
        for b in &self.branches {
            let mut local = Vec::new();
            let want = caches.is_some();
            let y = self.run_branch(b, input, want.then_some(&mut local))?;
            if let Some(c) = caches.as_deref_mut() {
                c.push(local);
            }
            fused.extend_from_slice(y.data());
        }
        Tensor::from_vec(&[fused.len()], fused)
    }

    /// Class logits for one `[C, H, W]` input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let f = self.fused_features(input, None)?;
        fc_forward(&f, &self.params[self.head.0].value, &self.params[self.head.1].value)
    }

    /// Argmax of the logits; ties go to the lower class.
    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(argmax(self.forward(input)?.data()))
    }

    /// Forward and backward for one labelled sample.
    pub fn loss_and_grads(&self, input: &Tensor, label: usize) -> Result<SampleGrad> {
        self.check_input(input)?;
        let mut caches = Vec::with_capacity(self.branches.len());
        let features = self.fused_features(input, Some(&mut caches))?;
        let (hw, hb) = self.head;
        let logits = fc_forward(&features, &self.params[hw].value, &self.params[hb].value)?;
        let (loss, glogits) = softmax_xent(&logits, label)?;
        let fc = fc_backward(&features, &self.params[hw].value, &glogits)?;

        let mut grads: Vec<Tensor> = self.params.iter().map(|p| p.value.zeros_like()).collect();
        grads[hw] = fc.weights;
        grads[hb] = fc.bias;

        let mut offset = 0;
        for (bi, (b, branch_caches)) in self.branches.iter().zip(caches).enumerate() {
            let feat_len = self.table.branch_features[bi];
            let out_shape = self
                .table
                .branch_rows(bi)
                .last()
                .map(|r| r.shape.clone())
                .unwrap_or_default();
            let mut g = Tensor::from_vec(&out_shape, fc.input.data()[offset..offset + feat_len].to_vec())?;
            offset += feat_len;
            for (op, cache) in b.ops.iter().zip(branch_caches).rev() {
                g = match (op, cache) {
                    (Op::Conv { weight, bias, op }, Cache::Conv(c)) => {
                        let cg = op.backward(&c, &self.params[*weight].value, &g)?;
                        grads[*weight] = cg.weights;
                        grads[*bias] = cg.bias;
                        cg.input
                    }
                    (Op::Pool(p), Cache::Pool(c)) => p.backward(&c, &g)?,
                    (Op::Lrn(p), Cache::Lrn(x)) => lrn_backward(&x, p, &g)?,
                    (Op::Relu, Cache::Relu(x)) => relu_backward(&x, &g)?,
                    _ => unreachable!("caches are recorded in op order"),
                };
            }
        }
        Ok(SampleGrad { loss, logits, grads })
    }

    /// Writes `model.bin`; see [`Network::to_bytes`].
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Network::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format { path: path.into(), msg },
            other => other,
        })
    }

    /// `PDM1`, a u32 LE header length, a UTF-8 header, then one PDT1 record per parameter.
    ///
    /// The header holds `version=1`, the architecture as `key=value` lines,
    /// then one `param <name> <d0>x<d1>...` line per parameter in order.
    /// Parameters are stored as f32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("version={MODEL_VERSION}\n{}", self.spec.to_kv());
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(ToString::to_string).collect();
            header.push_str(&format!("param {} {}\n", p.name, dims.join("x")));
        }
        let mut out = MODEL_MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for p in &self.params {
            out.extend(encode_pdt(&p.value)?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: "<model>".into(),
            msg,
        };
        if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
            return Err(bad("not a PDM1 model file".into()));
        }
        let hlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let header = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| bad("truncated header".into()))
            .and_then(|h| std::str::from_utf8(h).map_err(|e| bad(e.to_string())))?;
        let (arch_lines, param_lines): (Vec<&str>, Vec<&str>) = header.lines().partition(|l| !l.starts_with("param "));
        let mut entries = kv::parse(&arch_lines.join("\n"))?;
        match entries.iter().position(|e| e.key == "version") {
            Some(i) if entries[i].value == MODEL_VERSION.to_string() => {
                entries.remove(i);
            }
            _ => return Err(bad(format!("unsupported model version (expected {MODEL_VERSION})"))),
        }
        let spec = PdcnnSpec::from_kv(&entries)?;
        let mut net = Network::zeros(spec)?;
        if param_lines.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "model file lists {} parameters, architecture has {}",
                param_lines.len(),
                net.params.len()
            )));
        }
        let mut cur = 8 + hlen;
        let mut values = Vec::with_capacity(param_lines.len());
        for (line, p) in param_lines.iter().zip(&net.params) {
            let name = line.split_whitespace().nth(1).unwrap_or("");
            if name != p.name {
                return Err(Error::Shape(format!(
                    "model file has {name:?} where {} was expected",
                    p.name
                )));
            }
            let (t, used) = decode_pdt(&bytes[cur..]).map_err(|m| bad(format!("{}: {m}", p.name)))?;
            cur += used;
            values.push(t);
        }
        if cur != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cur)));
        }
        net.set_values(values)?;
        Ok(net)
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"PDM1";
pub const MODEL_VERSION: u32 = 1;

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
