//! Encoder `f`, classifier `g`, and the bundle that ties them to the
//! train-only degradation and restoration operators.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::scaled_uniform;
use crate::latentdr::{DegradationOperator, OperatorConfig, RestorationOperator};
use crate::rng::RngStreams;
use crate::tensor::{Graph, ParamId, ParameterRegistry, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        registry: &mut ParameterRegistry,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: registry.register(
                format!("{prefix}.weight"),
                scaled_uniform(&[fan_in, fan_out], fan_in, rng),
            )?,
            bias: registry.register(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, reg: &ParameterRegistry, x: Var) -> Result<Var> {
        let w = g.param(reg, self.weight);
        let b = g.param(reg, self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

/// GELU MLP `input_dim → hidden… → d`; no activation after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<Linear>,
    pub widths: Vec<usize>,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(
        registry: &mut ParameterRegistry,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("encoder widths {widths:?} need ≥2 positive entries")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(registry, &format!("encoder.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            widths: widths.to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn forward(&self, g: &mut Graph, reg: &ParameterRegistry, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::Dimension {
                op: "encode",
                lhs: shape.to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, reg, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

/// Affine classifier `ZW + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub linear: Linear,
    pub classes: usize,
    pub dim: usize,
}

impl Classifier {
    pub fn init<R: Rng + ?Sized>(
        registry: &mut ParameterRegistry,
        prefix: &str,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Self {
            linear: Linear::init(registry, prefix, dim, classes, rng)?,
            classes,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, reg: &ParameterRegistry, z: Var) -> Result<Var> {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Dimension {
                op: "classify",
                lhs: shape.to_vec(),
                rhs: vec![self.dim, self.classes],
            });
        }
        self.linear.forward(g, reg, z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub classes: usize,
    pub share_classifier: bool,
    pub operator: OperatorConfig,
}

impl ModelConfig {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.latent_dim);
        w
    }
}

/// Encoder, classifier and (optionally) the augmentation operators over one
/// parameter registry.
///
/// Registration order is encoder, classifier, then everything train-only, so
/// the inference parameters always form a prefix of the registry.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub registry: ParameterRegistry,
    pub encoder: Encoder,
    pub classifier: Classifier,
    /// Present only when the augmented terms use their own classifier.
    pub aux_classifier: Option<Classifier>,
    pub degrader: Option<DegradationOperator>,
    pub restorer: Option<RestorationOperator>,
    inference_params: usize,
}

impl ModelBundle {
    pub fn new(cfg: &ModelConfig, streams: &RngStreams) -> Result<Self> {
        let mut registry = ParameterRegistry::new();
        let encoder = Encoder::init(&mut registry, &cfg.widths(), &mut streams.stream("init/encoder"))?;
        let classifier = Classifier::init(
            &mut registry,
            "classifier",
            cfg.latent_dim,
            cfg.classes,
            &mut streams.stream("init/classifier"),
        )?;
        let inference_params = registry.len();
        let aux_classifier = if cfg.share_classifier {
            None
        } else {
            Some(Classifier::init(
                &mut registry,
                "aux_classifier",
                cfg.latent_dim,
                cfg.classes,
                &mut streams.stream("init/aux_classifier"),
            )?)
        };
        let degrader = DegradationOperator::init(
            &mut registry,
            "degrader",
            cfg.latent_dim,
            &cfg.operator,
            &mut streams.stream("init/degrader"),
        )?;
        let restorer = RestorationOperator::init(
            &mut registry,
            "restorer",
            cfg.latent_dim,
            &cfg.operator,
            &mut streams.stream("init/restorer"),
        )?;
        Ok(Self {
            registry,
            encoder,
            classifier,
            aux_classifier,
            degrader: Some(degrader),
            restorer: Some(restorer),
            inference_params,
        })
    }

    /// Encoder and classifier only.
    pub fn inference_only(widths: &[usize], classes: usize, streams: &RngStreams) -> Result<Self> {
        let mut registry = ParameterRegistry::new();
        let encoder = Encoder::init(&mut registry, widths, &mut streams.stream("init/encoder"))?;
        let classifier = Classifier::init(
            &mut registry,
            "classifier",
            encoder.latent_dim(),
            classes,
            &mut streams.stream("init/classifier"),
        )?;
        let inference_params = registry.len();
        Ok(Self {
            registry,
            encoder,
            classifier,
            aux_classifier: None,
            degrader: None,
            restorer: None,
            inference_params,
        })
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    pub fn shares_classifier(&self) -> bool {
        self.aux_classifier.is_none()
    }

    /// Parameters used by inference (a registry prefix).
    pub fn inference_param_ids(&self) -> impl Iterator<Item = ParamId> {
        self.registry.ids().take(self.inference_params)
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.encoder.forward(g, &self.registry, x)
    }

    pub fn classify(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.classifier.forward(g, &self.registry, z)
    }

    /// Classifier used for the degraded and restored terms.
    pub fn classify_augmented(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.aux_classifier
            .as_ref()
            .unwrap_or(&self.classifier)
            .forward(g, &self.registry, z)
    }

    pub fn latents(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = self.encode(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = self.encode(&mut g, xv)?;
        let logits = self.classify(&mut g, z)?;
        Ok(g.value(logits).clone())
    }

    /// `argmax g(f(x))`, lowest class index on ties. Never touches the
    /// augmentation operators.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// A copy holding only the encoder and classifier.
    pub fn without_operators(&self) -> ModelBundle {
        let mut registry = self.registry.clone();
        registry.truncate(self.inference_params);
        ModelBundle {
            registry,
            encoder: self.encoder.clone(),
            classifier: self.classifier.clone(),
            aux_classifier: None,
            degrader: None,
            restorer: None,
            inference_params: self.inference_params,
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::write(&self.registry, path)
    }

    /// Loads values saved from a bundle with the same layout.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = checkpoint::read(path)?;
        checkpoint::apply(&mut self.registry, entries)
    }
}

/// Parameter checkpoints.
///
/// ```text
/// LATENTDR-CHECKPOINT 1
/// params <count>
/// <name> f64 <d0>x<d1>…     (one line per parameter)
/// end
/// <raw little-endian f64 values, parameters in manifest order>
/// ```
pub mod checkpoint {
    use super::*;

    const MAGIC: &str = "LATENTDR-CHECKPOINT 1";

    pub fn to_bytes(registry: &ParameterRegistry) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "params {}", registry.len()).unwrap();
        for (_, p) in registry.iter() {
            let dims: Vec<String> = p.value().shape().iter().map(usize::to_string).collect();
            writeln!(out, "{} f64 {}", p.name(), dims.join("x")).unwrap();
        }
        writeln!(out, "end").unwrap();
        for (_, p) in registry.iter() {
            for v in p.value().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Parse("truncated checkpoint manifest".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|e| Error::Parse(e.to_string()))
        };
        if next_line()? != MAGIC {
            return Err(Error::Parse("not a checkpoint file".into()));
        }
        let count: usize = next_line()?
            .strip_prefix("params ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("bad parameter count line".into()))?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let mut parts = line.split(' ');
            let (Some(name), Some("f64"), Some(dims), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Parse(format!("bad manifest line {line:?}")));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|e| Error::Parse(format!("{line:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name.to_string(), shape));
        }
        if next_line()? != "end" {
            return Err(Error::Parse("missing manifest terminator".into()));
        }
        let mut data = &bytes[pos..];
        let mut out = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            if data.len() < n * 8 {
                return Err(Error::Parse(format!("payload for {name} truncated")));
            }
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            out.push((name, Tensor::new(shape, values)?));
        }
        if !data.is_empty() {
            return Err(Error::Parse(format!("{} trailing bytes", data.len())));
        }
        Ok(out)
    }

    pub fn write(registry: &ParameterRegistry, path: &Path) -> Result<()> {
        std::fs::write(path, to_bytes(registry)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        from_bytes(&bytes)
    }

    /// Writes loaded values into a registry with the same names and shapes.
    pub fn apply(registry: &mut ParameterRegistry, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != registry.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} parameters, model has {}",
                entries.len(),
                registry.len()
            )));
        }
        for (name, value) in entries {
            let id = registry
                .lookup(&name)
                .ok_or_else(|| Error::Validation(format!("unknown parameter {name:?}")))?;
            registry.set_value(id, value)?;
        }
        Ok(())
    }
}
