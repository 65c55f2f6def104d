//! Declarative single-branch architectures (3, 4 or 5 conv layers), their
//! n-way parallel composition, shape checking and parameter counting.

use std::fmt;

use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::layers::{conv_output_extent, pool_output_extent, LrnParams};

/// Largest number of parallel branches.
pub const MAX_BRANCHES: usize = 4;

/// Conv-layer filter counts for conv1..conv5.
pub const FILTERS: [usize; 5] = [64, 96, 96, 64, 64];
/// Kernel sizes for conv1..conv5 at variant 0.
pub const KERNELS: [usize; 5] = [7, 5, 3, 3, 3];

const CONV1_CYCLE: [usize; 3] = [7, 5, 9];
const CONV2_CYCLE: [usize; 3] = [5, 3, 5];

/// Everything about an architecture that is not its depth: widths, strides,
/// padding, pooling, LRN constants, class count, input shape and init scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub filters: [usize; 5],
    pub strides: [usize; 5],
    pub paddings: [usize; 5],
    pub pool_window: usize,
    pub pool_stride: usize,
    pub lrn: LrnParams,
    pub classes: usize,
    /// `[C, H, W]` of the network input (the crop, not the source image).
    pub input: [usize; 3],
    /// Standard deviation of the Gaussian weight init; biases start at 0.
    pub init_sigma: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            filters: FILTERS,
            strides: [4, 1, 1, 1, 1],
            paddings: [2, 2, 1, 1, 1],
            pool_window: 3,
            pool_stride: 2,
            lrn: LrnParams::default(),
            classes: 2,
            input: [3, 224, 224],
            init_sigma: 0.01,
        }
    }
}

impl ArchConfig {
    /// Width-reduced variant for 56x56 crops of 64x64 images: one eighth of
    /// the filters, conv1 stride 2, and init sigma 0.2, since the narrow stack
    /// does not train from the 0.01 default.
    pub fn desk() -> Self {
        ArchConfig {
            filters: [8, 12, 12, 8, 8],
            strides: [2, 1, 1, 1, 1],
            input: [3, 56, 56],
            init_sigma: 0.2,
            ..ArchConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(ArchConfig::default()),
            "desk" => Ok(ArchConfig::desk()),
            other => Err(Error::Domain(format!(
                "unknown preset {other:?} (expected full or desk)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lrn.validate()?;
        let positive = |v: &[usize]| v.iter().all(|&x| x > 0);
        if !positive(&self.filters) || !positive(&self.strides) || self.pool_window == 0 || self.pool_stride == 0 {
            return Err(Error::Domain("filters, strides and pool sizes must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !positive(&self.input) {
            return Err(Error::Domain(format!("input shape {:?} must be positive", self.input)));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Domain(format!(
                "init_sigma must be >= 0, got {}",
                self.init_sigma
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` entry. Returns `Ok(false)` for keys this type does not own.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        fn five(e: &Entry) -> Result<[usize; 5]> {
            let v: Vec<usize> = e.list()?;
            v.try_into().map_err(|_| Error::Parse {
                line: e.line,
                msg: format!("{} needs 5 values", e.key),
            })
        }
        match e.key.as_str() {
            "preset" => {
                *self = ArchConfig::preset(&e.value).map_err(|err| Error::Parse {
                    line: e.line,
                    msg: err.to_string(),
                })?
            }
            "filters" => self.filters = five(e)?,
            "strides" => self.strides = five(e)?,
            "paddings" => self.paddings = five(e)?,
            "pool_window" => self.pool_window = e.parse()?,
            "pool_stride" => self.pool_stride = e.parse()?,
            "lrn_n" => self.lrn.n = e.parse()?,
            "lrn_k" => self.lrn.k = e.parse()?,
            "lrn_alpha" => self.lrn.alpha = e.parse()?,
            "lrn_beta" => self.lrn.beta = e.parse()?,
            "classes" => self.classes = e.parse()?,
            "init_sigma" => self.init_sigma = e.parse()?,
            "input" => {
                let v: Vec<usize> = e.list()?;
                self.input = v.try_into().map_err(|_| Error::Parse {
                    line: e.line,
                    msg: "input needs C,H,W".into(),
                })?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key=value` lines that [`ArchConfig::apply`] reads back to an equal config.
    pub fn to_kv(&self) -> String {
        let l = &self.lrn;
        format!(
            "filters={}\nstrides={}\npaddings={}\npool_window={}\npool_stride={}\n\
             lrn_n={}\nlrn_k={:?}\nlrn_alpha={:?}\nlrn_beta={:?}\nclasses={}\ninput={}\ninit_sigma={:?}\n",
            kv::join(&self.filters),
            kv::join(&self.strides),
            kv::join(&self.paddings),
            self.pool_window,
            self.pool_stride,
            l.n,
            l.k,
            l.alpha,
            l.beta,
            self.classes,
            kv::join(&self.input),
            self.init_sigma,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Lrn(LrnParams),
    Relu,
    Fc {
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// One branch: conv1, pool1, norm1, conv2, pool2, rnorm2, conv3, pool3,
/// rnorm3, [conv4], [conv5], fc2, with a ReLU after each conv.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub depth: usize,
    pub variant: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Layers up to the classifier.
    pub fn feature_layers(&self) -> &[LayerSpec] {
        match self.layers.last() {
            Some(LayerSpec {
                kind: LayerKind::Fc { .. },
                ..
            }) => &self.layers[..self.layers.len() - 1],
            _ => &self.layers,
        }
    }

    pub fn conv_kernels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Conv { kernel, .. } => Some(kernel),
                _ => None,
            })
            .collect()
    }
}

/// Kernel sizes of conv1..conv5 for a variant.
///
/// conv1 cycles through (7, 5, 9) and conv2 through (5, 3, 5); every third
/// variant also widens conv3 by 2 so that variants 0..=3 are pairwise distinct.
pub fn variant_kernels(variant: usize) -> [usize; 5] {
    let mut k = KERNELS;
    k[0] = CONV1_CYCLE[variant % 3];
    k[1] = CONV2_CYCLE[variant % 3];
    k[2] += 2 * (variant / 3);
    k
}

pub fn build_arch(depth: usize, variant: usize) -> Result<ArchitectureSpec> {
    build_arch_with(depth, variant, &ArchConfig::default())
}

pub fn build_arch_with(depth: usize, variant: usize, cfg: &ArchConfig) -> Result<ArchitectureSpec> {
    if !(3..=5).contains(&depth) {
        return Err(Error::Domain(format!("unsupported depth {depth}; expected 3, 4 or 5")));
    }
    let kernels = variant_kernels(variant);
    let mut layers = Vec::new();
    let mut push = |name: String, kind| layers.push(LayerSpec { name, kind });
    let norm_names = ["norm1", "rnorm2", "rnorm3"];
    for i in 0..depth {
        let n = i + 1;
        push(
            format!("conv{n}"),
            LayerKind::Conv {
                filters: cfg.filters[i],
                kernel: kernels[i],
                stride: cfg.strides[i],
                padding: cfg.paddings[i],
            },
        );
        push(format!("relu{n}"), LayerKind::Relu);
        if i < 3 {
            push(
                format!("pool{n}"),
                LayerKind::MaxPool {
                    window: cfg.pool_window,
                    stride: cfg.pool_stride,
                },
            );
            push(norm_names[i].to_string(), LayerKind::Lrn(cfg.lrn));
        }
    }
    push("fc2".into(), LayerKind::Fc { classes: cfg.classes });
    let name = match variant {
        0 => format!("arch{}", depth - 2),
        v => format!("arch{}v{v}", depth - 2),
    };
    Ok(ArchitectureSpec {
        name,
        depth,
        variant,
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Flatten each branch's final feature map and concatenate in branch order.
    Concat,
}

/// n parallel branches fused by concatenation into one shared classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PdcnnSpec {
    pub branches: Vec<ArchitectureSpec>,
    pub fusion: Fusion,
    pub classes: usize,
    pub config: ArchConfig,
}

impl PdcnnSpec {
    pub fn depths(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.depth).collect()
    }

    pub fn variants(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.variant).collect()
    }

    /// Wraps one architecture as a 1-PDCNN.
    pub fn single(arch: ArchitectureSpec, config: ArchConfig) -> Self {
        PdcnnSpec {
            branches: vec![arch],
            fusion: Fusion::Concat,
            classes: config.classes,
            config,
        }
    }

    /// `depths=`/`variants=` lines followed by the config.
    pub fn to_kv(&self) -> String {
        format!(
            "depths={}\nvariants={}\n{}",
            kv::join(&self.depths()),
            kv::join(&self.variants()),
            self.config.to_kv()
        )
    }

    /// Rebuilds a spec from `key=value` entries; unknown keys are errors.
    pub fn from_kv(entries: &[Entry]) -> Result<Self> {
        let mut cfg = ArchConfig::default();
        let mut depths = None;
        let mut variants = None;
        // preset first so explicit keys override it regardless of order
        for e in entries.iter().filter(|e| e.key == "preset") {
            cfg.apply(e)?;
        }
        for e in entries.iter().filter(|e| e.key != "preset") {
            match e.key.as_str() {
                "depths" => depths = Some(e.list::<usize>()?),
                "variants" => variants = Some(e.list::<usize>()?),
                _ if cfg.apply(e)? => {}
                other => {
                    return Err(Error::Parse {
                        line: e.line,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        let depths = depths.ok_or_else(|| Error::Domain("architecture has no depths".into()))?;
        build_pdcnn_with(&depths, variants.as_deref(), &cfg)
    }
}

impl fmt::Display for PdcnnSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-PDCNN[{}]", self.branches.len(), kv::join(&self.depths()))
    }
}

/// Variant for each branch: how many earlier branches share its depth.
pub fn default_variants(depths: &[usize]) -> Vec<usize> {
    depths
        .iter()
        .enumerate()
        .map(|(i, d)| depths[..i].iter().filter(|&&e| e == *d).count())
        .collect()
}

pub fn build_pdcnn(depths: &[usize]) -> Result<PdcnnSpec> {
    build_pdcnn_with(depths, None, &ArchConfig::default())
}

/// Builds the branches with explicit per-branch `variants`, or [`default_variants`] when `None`.
pub fn build_pdcnn_with(depths: &[usize], variants: Option<&[usize]>, cfg: &ArchConfig) -> Result<PdcnnSpec> {
    if depths.is_empty() || depths.len() > MAX_BRANCHES {
        return Err(Error::Domain(format!(
            "a PDCNN needs 1 to {MAX_BRANCHES} branches, got {}",
            depths.len()
        )));
    }
    cfg.validate()?;
    let variants = match variants {
        Some(v) if v.len() != depths.len() => {
            return Err(Error::Domain(format!(
                "{} variants given for {} branches",
                v.len(),
                depths.len()
            )))
        }
        Some(v) => v.to_vec(),
        None => default_variants(depths),
    };
    let branches = depths
        .iter()
        .zip(&variants)
        .map(|(&d, &v)| build_arch_with(d, v, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(PdcnnSpec {
        branches,
        fusion: Fusion::Concat,
        classes: cfg.classes,
        config: cfg.clone(),
    })
}

/// Output shape of one layer in a dry run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub branch: usize,
    pub layer: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTable {
    pub rows: Vec<ShapeRow>,
    /// Flattened feature length per branch.
    pub branch_features: Vec<usize>,
    pub fused: usize,
    pub classes: usize,
}

impl ShapeTable {
    pub fn branch_rows(&self, branch: usize) -> impl Iterator<Item = &ShapeRow> {
        self.rows.iter().filter(move |r| r.branch == branch)
    }
}

/// Propagates `input` (`[C, H, W]`) through every branch, naming the first layer that collapses.
pub fn shape_check(spec: &PdcnnSpec, input: [usize; 3]) -> Result<ShapeTable> {
    if input.contains(&0) {
        return Err(Error::Shape(format!("input shape {input:?} must be positive")));
    }
    let mut rows = Vec::new();
    let mut branch_features = Vec::new();
    for (b, arch) in spec.branches.iter().enumerate() {
        let [mut c, mut h, mut w] = input;
        for layer in arch.feature_layers() {
            let (ic, ih, iw) = (c, h, w);
            let collapse = || {
                Error::Shape(format!(
                    "branch {b} ({}) layer {} collapses a {ic}x{ih}x{iw} input",
                    arch.name, layer.name
                ))
            };
            match layer.kind {
                LayerKind::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    h = conv_output_extent(h, kernel, stride, padding)
                        .filter(|&v| v > 0)
                        .ok_or_else(collapse)?;
                    w = conv_output_extent(w, kernel, stride, padding)
                        .filter(|&v| v > 0)
                        .ok_or_else(collapse)?;
                    c = filters;
                }
                LayerKind::MaxPool { window, stride } => {
                    h = pool_output_extent(h, window, stride).ok_or_else(collapse)?;
                    w = pool_output_extent(w, window, stride).ok_or_else(collapse)?;
                }
                LayerKind::Lrn(_) | LayerKind::Relu => {}
                LayerKind::Fc { .. } => unreachable!("feature_layers strips the classifier"),
            }
            rows.push(ShapeRow {
                branch: b,
                layer: layer.name.clone(),
                shape: vec![c, h, w],
            });
        }
        branch_features.push(c * h * w);
    }
    let fused = branch_features.iter().sum();
    Ok(ShapeTable {
        rows,
        branch_features,
        fused,
        classes: spec.classes,
    })
}

/// `(layer name, weights + biases)` for each conv layer of a branch.
pub fn conv_param_counts(arch: &ArchitectureSpec, in_channels: usize) -> Vec<(String, usize)> {
    let mut c = in_channels;
    let mut out = Vec::new();
    for l in &arch.layers {
        if let LayerKind::Conv { filters, kernel, .. } = l.kind {
            out.push((l.name.clone(), filters * c * kernel * kernel + filters));
            c = filters;
        }
    }
    out
}

/// Trainable scalars of one branch's conv layers.
pub fn branch_param_count(arch: &ArchitectureSpec, in_channels: usize) -> usize {
    conv_param_counts(arch, in_channels).iter().map(|(_, n)| n).sum()
}

/// All trainable scalars: every branch's convs plus the shared classifier,
/// at the spec's configured input shape.
pub fn param_count(spec: &PdcnnSpec) -> Result<usize> {
    let table = shape_check(spec, spec.config.input)?;
    let convs: usize = spec
        .branches
        .iter()
        .map(|b| branch_param_count(b, spec.config.input[0]))
        .sum();
    Ok(convs + spec.classes * table.fused + spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(a: &ArchitectureSpec) -> Vec<&str> {
        a.layers.iter().map(|l| l.name.as_str()).collect()
    }

    #[test]
    fn depth_three_layout() {
        let a = build_arch(3, 0).unwrap();
        let n = names(&a);
        assert_eq!(
            n,
            [
                "conv1", "relu1", "pool1", "norm1", "conv2", "relu2", "pool2", "rnorm2", "conv3", "relu3", "pool3",
                "rnorm3", "fc2"
            ]
        );
        assert_eq!(a.conv_kernels(), vec![7, 5, 3]);
    }

    #[test]
    fn depth_four_adds_conv4() {
        let a = build_arch(4, 0).unwrap();
        let n = names(&a);
        assert_eq!(&n[n.len() - 3..], ["conv4", "relu4", "fc2"]);
        assert_eq!(
            a.layers[n.len() - 3].kind,
            LayerKind::Conv {
                filters: 64,
                kernel: 3,
                stride: 1,
                padding: 1
            }
        );
        let filters: Vec<usize> = a
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Conv { filters, .. } => Some(filters),
                _ => None,
            })
            .collect();
        assert_eq!(filters, vec![64, 96, 96, 64]);
        assert_eq!(a.conv_kernels(), vec![7, 5, 3, 3]);
    }

    #[test]
    fn variant_one_changes_conv1() {
        let a = build_arch(4, 0).unwrap();
        let b = build_arch(4, 1).unwrap();
        assert_eq!(names(&a), names(&b));
        assert_eq!(b.conv_kernels()[0], 5);
        assert_ne!(a, b);
    }

    #[test]
    fn variants_zero_to_three_distinct() {
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(variant_kernels(i), variant_kernels(j), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn bad_depths() {
        assert!(matches!(build_arch(2, 0), Err(Error::Domain(_))));
        assert!(matches!(build_arch(6, 0), Err(Error::Domain(_))));
        assert!(build_pdcnn(&[]).is_err());
        assert!(build_pdcnn(&[4, 4, 4, 4, 4]).is_err());
        assert!(build_pdcnn(&[4, 7]).is_err());
    }

    #[test]
    fn pdcnn_variants() {
        let p = build_pdcnn(&[4, 3, 4]).unwrap();
        assert_eq!(p.variants(), vec![0, 0, 1]);
        assert_eq!(p.branches[2].conv_kernels()[0], 5);
        assert_eq!(p.to_string(), "3-PDCNN[4,3,4]");
    }

    #[test]
    fn full_scale_arch2_shapes() {
        let p = PdcnnSpec::single(build_arch(4, 0).unwrap(), ArchConfig::default());
        let t = shape_check(&p, [3, 224, 224]).unwrap();
        assert_eq!(t.rows[0].layer, "conv1");
        assert_eq!(t.rows[0].shape, vec![64, 56, 56]);
        assert!(t.rows.iter().all(|r| r.shape.iter().all(|&d| d > 0)));
        assert_eq!(t.fused, 64 * 6 * 6);
    }

    #[test]
    fn collapse_names_conv1() {
        let p = build_pdcnn(&[4]).unwrap();
        match shape_check(&p, [3, 1, 1]) {
            Err(Error::Shape(msg)) => assert!(msg.contains("conv1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conv1_param_count() {
        let a = build_arch(4, 0).unwrap();
        let counts = conv_param_counts(&a, 3);
        assert_eq!(counts[0], ("conv1".to_string(), 9472));
        assert_eq!(counts[3].1, 64 * 96 * 9 + 64);
    }

    #[test]
    fn kv_round_trip() {
        let p = build_pdcnn_with(&[4, 3, 4], Some(&[0, 2, 1]), &ArchConfig::desk()).unwrap();
        let back = PdcnnSpec::from_kv(&kv::parse(&p.to_kv()).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = kv::parse("depths=4\nfliters=1,2,3,4,5\n").unwrap();
        match PdcnnSpec::from_kv(&e) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
