//! The desk-scale detector: a plain conv backbone with three taps, the
//! semantic prediction heads, semantic bridges, the three domain
//! discriminators and a dense surrogate detection head.
//!
//! All spatial tensors are NCHW. Parameter names are prefixed by component
//! (`backbone.`, `spm.local.`, `spm.mid.`, `spm.global.`, `disc.local.`,
//! `disc.mid.`, `disc.global.`, `det.`) so training can switch components
//! on and off by prefix.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rf::{ConvStackSpec, LayerSpec, Taps};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stages: Vec<ConvStage>,
    pub taps: Taps,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |kernel, stride, channels| ConvStage {
            kernel,
            stride,
            padding: kernel / 2,
            channels,
        };
        Self {
            input_channels: 3,
            stages: vec![
                stage(3, 2, 8),
                stage(3, 1, 8),
                stage(3, 2, 16),
                stage(3, 1, 16),
                stage(3, 2, 24),
                stage(3, 1, 24),
            ],
            taps: Taps { f1: 2, f2: 4, f3: 6 },
        }
    }
}

impl BackboneConfig {
    pub fn stack(&self) -> Result<ConvStackSpec> {
        ConvStackSpec::new(
            self.stages
                .iter()
                .map(|s| LayerSpec::new(s.kernel, s.stride, s.padding))
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let stack = self.stack()?;
        self.taps.validate(&stack)?;
        if self.input_channels == 0 || self.stages.iter().any(|s| s.channels == 0) {
            return Err(Error::InvalidConfig("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels at layer `k` (1-based).
    pub fn channels_at(&self, k: usize) -> usize {
        self.stages[k - 1].channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    /// N in the "N×CR" trunks of the prediction heads.
    pub trunk_depth: usize,
    /// S1: width of the local head trunk, bridged into the local discriminator.
    pub local_sem_channels: usize,
    /// S2: width of the mid head trunk, bridged into the mid discriminator.
    pub mid_sem_channels: usize,
    pub global_hidden: usize,
    pub disc_hidden: usize,
    pub det_hidden: usize,
    /// Semantic bridges into the local and mid discriminators.
    pub bridge: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_classes: 3,
            trunk_depth: 2,
            local_sem_channels: 16,
            mid_sem_channels: 16,
            global_hidden: 32,
            disc_hidden: 16,
            det_hidden: 32,
            bridge: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 || self.trunk_depth == 0 {
            return Err(Error::InvalidConfig("num_classes and trunk_depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn c1(&self) -> usize {
        self.backbone.channels_at(self.backbone.taps.f1)
    }

    pub fn c2(&self) -> usize {
        self.backbone.channels_at(self.backbone.taps.f2)
    }

    pub fn c3(&self) -> usize {
        self.backbone.channels_at(self.backbone.taps.f3)
    }

    /// Input channels of the local and mid discriminators.
    pub fn disc_channels(&self) -> (usize, usize) {
        if self.bridge {
            (self.c1() + self.local_sem_channels, self.c2() + self.mid_sem_channels)
        } else {
            (self.c1(), self.c2())
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneTaps {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SpmOutputs {
    /// (N,1,H1,W1) foreground probability.
    pub local: Var,
    /// (N,K,H2,W2) per-position class probabilities.
    pub mid: Var,
    /// (N,K) image-level class probabilities.
    pub global: Var,
    /// (N,S1,H1,W1) penultimate local features.
    pub local_feat: Var,
    /// (N,S2,H2,W2) penultimate mid features.
    pub mid_feat: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DetOutputs {
    /// (N,1,H3,W3)
    pub objectness: Var,
    /// (N,K,H3,W3)
    pub classes: Var,
    /// (N,4,H3,W3) raw box regression
    pub boxes: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscOutputs {
    pub local: Option<Var>,
    pub mid: Option<Var>,
    pub global: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Scfam {
    cfg: NetConfig,
}

fn conv_init(store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize, seed: u64, gain: f64) {
    let fan_in = (inp * k * k) as f64;
    store.init_normal(&format!("{name}.w"), &[out, inp, k, k], (gain / fan_in).sqrt(), seed);
    store.init_zeros(&format!("{name}.b"), &[out]);
}

impl Scfam {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Fresh weights for every component. He init for ReLU layers, unit-gain
    /// init for output layers.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.cfg;
        let k = c.num_classes;
        let mut s = ParamStore::new();
        let mut inp = c.backbone.input_channels;
        for (i, st) in c.backbone.stages.iter().enumerate() {
            conv_init(&mut s, &format!("backbone.conv{}", i + 1), st.channels, inp, st.kernel, seed, 2.0);
            inp = st.channels;
        }
        let trunk = |s: &mut ParamStore, prefix: &str, inp: usize, width: usize| {
            let mut ch = inp;
            for j in 0..c.trunk_depth {
                conv_init(s, &format!("{prefix}.trunk{j}"), width, ch, 1, seed, 2.0);
                ch = width;
            }
        };
        trunk(&mut s, "spm.local", c.c1(), c.local_sem_channels);
        conv_init(&mut s, "spm.local.out", 1, c.local_sem_channels, 1, seed, 1.0);
        trunk(&mut s, "spm.mid", c.c2(), c.mid_sem_channels);
        conv_init(&mut s, "spm.mid.out", k, c.mid_sem_channels, 1, seed, 1.0);
        trunk(&mut s, "spm.global", c.c3(), c.global_hidden);
        s.init_normal("spm.global.fc.w", &[k, c.global_hidden], (1.0 / c.global_hidden as f64).sqrt(), seed);
        s.init_zeros("spm.global.fc.b", &[k]);

        let (dl, dm) = c.disc_channels();
        conv_init(&mut s, "disc.local.hidden", c.disc_hidden, dl, 1, seed, 2.0);
        conv_init(&mut s, "disc.local.out", 1, c.disc_hidden, 1, seed, 1.0);
        conv_init(&mut s, "disc.mid.hidden", c.disc_hidden, dm, 1, seed, 2.0);
        conv_init(&mut s, "disc.mid.out", 1, c.disc_hidden, 1, seed, 1.0);
        conv_init(&mut s, "disc.global.hidden", c.disc_hidden, c.c3(), 1, seed, 2.0);
        s.init_normal("disc.global.fc.w", &[1, c.disc_hidden], (1.0 / c.disc_hidden as f64).sqrt(), seed);
        s.init_zeros("disc.global.fc.b", &[1]);

        conv_init(&mut s, "det.hidden", c.det_hidden, c.c3(), 1, seed, 2.0);
        conv_init(&mut s, "det.out", 1 + k + 4, c.det_hidden, 1, seed, 1.0);
        s
    }

    fn conv(&self, tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = p.var(&format!("{name}.w"))?;
        let b = p.var(&format!("{name}.b"))?;
        tape.conv2d(x, w, Some(b), stride, pad)
    }

    fn trunk(&self, tape: &mut Tape, p: &Bound, prefix: &str, mut x: Var) -> Result<Var> {
        for j in 0..self.cfg.trunk_depth {
            x = self.conv(tape, p, &format!("{prefix}.trunk{j}"), x, 1, 0)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    /// Puts a batch of images on the tape as an (N,C,H,W) constant.
    pub fn images_to_tape(&self, tape: &mut Tape, images: &[&crate::scene::Image]) -> Result<Var> {
        let first = images
            .first()
            .ok_or_else(|| Error::EmptyDataset("image batch".into()))?;
        let (h, w, ch) = (first.height, first.width, first.channels);
        if ch != self.cfg.backbone.input_channels {
            return Err(Error::shape("images", &[ch], &[self.cfg.backbone.input_channels]));
        }
        let mut data = Vec::with_capacity(images.len() * h * w * ch);
        for img in images {
            if (img.height, img.width, img.channels) != (h, w, ch) {
                return Err(Error::shape("images", &[h, w, ch], &[img.height, img.width, img.channels]));
            }
            data.extend(img.to_chw());
        }
        Ok(tape.constant(Tensor::new(&[images.len(), ch, h, w], data)?))
    }

    pub fn forward_backbone(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<BackboneTaps> {
        let (_, c, _, _) = tape
            .value(images)
            .dims4()
            .ok_or_else(|| Error::shape("forward_backbone", tape.shape(images), &[0, 0, 0, 0]))?;
        if c != self.cfg.backbone.input_channels {
            return Err(Error::shape("forward_backbone", tape.shape(images), &[self.cfg.backbone.input_channels]));
        }
        let taps = self.cfg.backbone.taps;
        let mut x = images;
        let mut out = [images; 3];
        for (i, st) in self.cfg.backbone.stages.iter().enumerate() {
            x = self.conv(tape, p, &format!("backbone.conv{}", i + 1), x, st.stride, st.padding)?;
            x = tape.relu(x)?;
            let layer = i + 1;
            if layer == taps.f1 {
                out[0] = x;
            } else if layer == taps.f2 {
                out[1] = x;
            } else if layer == taps.f3 {
                out[2] = x;
                break;
            }
        }
        Ok(BackboneTaps {
            f1: out[0],
            f2: out[1],
            f3: out[2],
        })
    }

    pub fn forward_spm(&self, tape: &mut Tape, p: &Bound, taps: &BackboneTaps) -> Result<SpmOutputs> {
        let local_feat = self.trunk(tape, p, "spm.local", taps.f1)?;
        let local = self.conv(tape, p, "spm.local.out", local_feat, 1, 0)?;
        let local = tape.sigmoid(local)?;

        let mid_feat = self.trunk(tape, p, "spm.mid", taps.f2)?;
        let mid = self.conv(tape, p, "spm.mid.out", mid_feat, 1, 0)?;
        let mid = tape.sigmoid(mid)?;

        let g = self.trunk(tape, p, "spm.global", taps.f3)?;
        let g = tape.adaptive_mean_pool(g, 1, 1)?;
        let n = tape.shape(g)[0];
        let g = tape.reshape(g, &[n, self.cfg.global_hidden])?;
        let g = tape.linear(g, p.var("spm.global.fc.w")?, Some(p.var("spm.global.fc.b")?))?;
        let global = tape.sigmoid(g)?;
        Ok(SpmOutputs {
            local,
            mid,
            global,
            local_feat,
            mid_feat,
        })
    }

    /// Channel concatenation of a backbone feature with SPM penultimate
    /// features on the same grid.
    pub fn semantic_bridge(tape: &mut Tape, feature: Var, spm_feat: Var) -> Result<Var> {
        let (a, b) = (tape.shape(feature), tape.shape(spm_feat));
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
            return Err(Error::shape("semantic_bridge", a, b));
        }
        tape.concat_channels(&[feature, spm_feat])
    }

    fn pixel_disc(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let x = tape.gradient_reversal(x)?;
        let h = self.conv(tape, p, &format!("{prefix}.hidden"), x, 1, 0)?;
        let h = tape.relu(h)?;
        let o = self.conv(tape, p, &format!("{prefix}.out"), h, 1, 0)?;
        tape.sigmoid(o)
    }

    /// Local (pixel) discriminator. The gradient reversal sits on its input.
    pub fn forward_disc_local(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<Var> {
        self.check_disc_input(tape, input, self.cfg.disc_channels().0)?;
        self.pixel_disc(tape, p, "disc.local", input)
    }

    pub fn forward_disc_mid(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<Var> {
        self.check_disc_input(tape, input, self.cfg.disc_channels().1)?;
        self.pixel_disc(tape, p, "disc.mid", input)
    }

    /// Image-level discriminator on F3, output (N,1).
    pub fn forward_disc_global(&self, tape: &mut Tape, p: &Bound, f3: Var) -> Result<Var> {
        let x = tape.gradient_reversal(f3)?;
        let h = self.conv(tape, p, "disc.global.hidden", x, 1, 0)?;
        let h = tape.relu(h)?;
        let h = tape.adaptive_mean_pool(h, 1, 1)?;
        let n = tape.shape(h)[0];
        let h = tape.reshape(h, &[n, self.cfg.disc_hidden])?;
        let o = tape.linear(h, p.var("disc.global.fc.w")?, Some(p.var("disc.global.fc.b")?))?;
        tape.sigmoid(o)
    }

    fn check_disc_input(&self, tape: &Tape, input: Var, channels: usize) -> Result<()> {
        let s = tape.shape(input);
        if s.len() != 4 || s[1] != channels {
            return Err(Error::shape("discriminator input", s, &[channels]));
        }
        Ok(())
    }

    /// All three discriminators. `local_in`/`mid_in` are the (optionally
    /// bridged) F1/F2 features.
    pub fn forward_discriminators(&self, tape: &mut Tape, p: &Bound, local_in: Var, mid_in: Var, f3: Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.forward_disc_local(tape, p, local_in)?,
            self.forward_disc_mid(tape, p, mid_in)?,
            self.forward_disc_global(tape, p, f3)?,
        ))
    }

    pub fn forward_det_head(&self, tape: &mut Tape, p: &Bound, f3: Var) -> Result<DetOutputs> {
        let k = self.cfg.num_classes;
        let h = self.conv(tape, p, "det.hidden", f3, 1, 0)?;
        let h = tape.relu(h)?;
        let o = self.conv(tape, p, "det.out", h, 1, 0)?;
        let obj = tape.slice_channels(o, 0, 1)?;
        let cls = tape.slice_channels(o, 1, k)?;
        let boxes = tape.slice_channels(o, 1 + k, 4)?;
        Ok(DetOutputs {
            objectness: tape.sigmoid(obj)?,
            classes: tape.sigmoid(cls)?,
            boxes,
        })
    }
}
