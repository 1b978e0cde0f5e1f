//! Multi-level aggregation codec: EEG window `[B, C, L]` to envelope `[B, L]`.
//!
//! The encoder is five `conv -> activation -> maxpool` stages; each pooled
//! output is kept as a bottleneck. The decoder walks back up: every stage
//! upsamples, refines with a convolution and concatenates the encoder
//! bottleneck of the same resolution. A last upsampling restores the full
//! length and a one-channel convolution emits the envelope.
//!
//! Parameter names: `enc.{0..4}.{kernel,bias}`, `dec.{0..3}.{kernel,bias}`,
//! `head.{kernel,bias}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{he_uniform, lecun_uniform, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Activation, ConvSpec, Tape, Tensor, Var};

pub const ENCODER_STAGES: usize = 5;
pub const DECODER_STAGES: usize = ENCODER_STAGES - 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub in_channels: usize,
    pub channels: [usize; ENCODER_STAGES],
    pub kernels: [usize; ENCODER_STAGES],
    pub pool: usize,
    pub decoder_kernels: [usize; DECODER_STAGES],
    pub head_kernel: usize,
    #[serde(with = "activation_serde")]
    pub activation: Activation,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            channels: [64, 64, 128, 128, 256],
            kernels: [7, 3, 3, 3, 3],
            pool: 2,
            decoder_kernels: [3; DECODER_STAGES],
            head_kernel: 3,
            activation: Activation::Relu,
        }
    }
}

impl CodecConfig {
    /// Narrow variant used for single-core training runs.
    pub fn desk() -> Self {
        Self {
            channels: [16, 16, 32, 32, 64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool < 2 {
            return Err(Error::Config(format!("pool factor {} < 2", self.pool)));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config(
                "codec channel counts must be positive".into(),
            ));
        }
        if self.kernels.contains(&0) || self.decoder_kernels.contains(&0) || self.head_kernel == 0 {
            return Err(Error::Config("codec kernel sizes must be positive".into()));
        }
        Ok(())
    }

    /// Window lengths must be multiples of this.
    pub fn length_quantum(&self) -> usize {
        self.pool.pow(ENCODER_STAGES as u32)
    }

    /// Output channels of decoder stage `j` (the skip it joins has the same width).
    fn decoder_channels(&self, j: usize) -> usize {
        self.channels[DECODER_STAGES - 1 - j]
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlots {
    kernel: usize,
    bias: usize,
}

impl ConvSlots {
    fn apply<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv1d(
            x,
            p.var(self.kernel),
            Some(p.var(self.bias)),
            ConvSpec::same(),
        )
    }
}

fn add_conv<T: Scalar>(
    params: &mut ParamSet<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rectified: bool,
    rng: &mut ChaCha8Rng,
) -> ConvSlots {
    let fan_in = cin * k;
    let kernel = if rectified {
        he_uniform(&[cout, cin, k], fan_in, rng)
    } else {
        lecun_uniform(&[cout, cin, k], fan_in, rng)
    };
    ConvSlots {
        kernel: params.push(format!("{name}.kernel"), kernel),
        bias: params.push(format!("{name}.bias"), Tensor::zeros(&[cout])),
    }
}

#[derive(Clone, Debug)]
pub struct MlaCodec<T> {
    cfg: CodecConfig,
    params: ParamSet<T>,
    enc: Vec<ConvSlots>,
    dec: Vec<ConvSlots>,
    head: ConvSlots,
}

impl<T: Scalar> MlaCodec<T> {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let rectified = cfg.activation == Activation::Relu;
        let mut enc = Vec::with_capacity(ENCODER_STAGES);
        let mut cin = cfg.in_channels;
        for j in 0..ENCODER_STAGES {
            enc.push(add_conv(
                &mut params,
                &format!("enc.{j}"),
                cfg.channels[j],
                cin,
                cfg.kernels[j],
                rectified,
                &mut rng,
            ));
            cin = cfg.channels[j];
        }
        let mut dec = Vec::with_capacity(DECODER_STAGES);
        for j in 0..DECODER_STAGES {
            let cout = cfg.decoder_channels(j);
            dec.push(add_conv(
                &mut params,
                &format!("dec.{j}"),
                cout,
                cin,
                cfg.decoder_kernels[j],
                rectified,
                &mut rng,
            ));
            cin = 2 * cout;
        }
        let head = add_conv(
            &mut params,
            "head",
            1,
            cin,
            cfg.head_kernel,
            false,
            &mut rng,
        );
        Ok(Self {
            cfg,
            params,
            enc,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "codec expects [B, {}, L], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let q = self.cfg.length_quantum();
        if shape[2] == 0 || shape[2] % q != 0 {
            return Err(Error::dim(format!(
                "window length {} is not a positive multiple of {q}",
                shape[2]
            )));
        }
        Ok(())
    }

    /// Five bottlenecks; bottleneck `j` has `L / pool^(j+1)` frames.
    pub fn encode(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        self.check_input(&tape.shape(x))?;
        let mut h = x;
        let mut out = Vec::with_capacity(ENCODER_STAGES);
        for stage in &self.enc {
            let c = stage.apply(tape, p, h)?;
            let a = tape.activation(c, self.cfg.activation)?;
            h = tape.maxpool1d(a, self.cfg.pool)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Envelope `[B, 1, L]` from the five bottlenecks of [`MlaCodec::encode`].
    pub fn decode(&self, tape: &Tape<T>, p: &Bound, bottlenecks: &[Var]) -> Result<Var> {
        if bottlenecks.len() != ENCODER_STAGES {
            return Err(Error::dim(format!(
                "decode needs {ENCODER_STAGES} bottlenecks, got {}",
                bottlenecks.len()
            )));
        }
        let mut h = bottlenecks[ENCODER_STAGES - 1];
        for (j, stage) in self.dec.iter().enumerate() {
            let up = tape.upsample_nearest(h, self.cfg.pool)?;
            let refined = stage.apply(tape, p, up)?;
            let refined = tape.activation(refined, self.cfg.activation)?;
            let skip = bottlenecks[DECODER_STAGES - 1 - j];
            let (rs, ss) = (tape.shape(refined), tape.shape(skip));
            if rs[2] != ss[2] {
                return Err(Error::dim(format!(
                    "decoder stage {j}: {} frames against skip with {}",
                    rs[2], ss[2]
                )));
            }
            h = tape.concat(refined, skip, 1)?;
        }
        let up = tape.upsample_nearest(h, self.cfg.pool)?;
        self.head.apply(tape, p, up)
    }

    /// `decode(encode(x))` with the channel axis squeezed: `[B, L]`.
    pub fn reconstruct(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let b = self.encode(tape, p, x)?;
        let y = self.decode(tape, p, &b)?;
        let s = tape.shape(y);
        tape.reshape(y, &[s[0], s[2]])
    }

    /// Inference without gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = self.reconstruct(&tape, &p, xv)?;
        let out = tape.value(y).clone();
        Ok(out)
    }
}

pub(crate) mod activation_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::tensor::Activation;

    pub fn name(a: Activation) -> &'static str {
        match a {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn serialize<S: Serializer>(a: &Activation, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(name(*a))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Activation, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown activation {s}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecConfig {
        CodecConfig {
            in_channels: 4,
            channels: [3, 3, 4, 4, 5],
            kernels: [5, 3, 3, 3, 3],
            ..CodecConfig::default()
        }
    }

    #[test]
    fn bottleneck_extents() {
        let codec = MlaCodec::<f64>::new(tiny(), 1).unwrap();
        let tape = Tape::new();
        let p = codec.params().bind(&tape, false);
        let x = tape.constant(Tensor::full(&[2, 4, 320], 0.1));
        let b = codec.encode(&tape, &p, x).unwrap();
        let extents: Vec<usize> = b.iter().map(|&v| tape.shape(v)[2]).collect();
        assert_eq!(extents, vec![160, 80, 40, 20, 10]);
        let y = codec.decode(&tape, &p, &b).unwrap();
        assert_eq!(tape.shape(y), vec![2, 1, 320]);
    }

    #[test]
    fn indivisible_length_rejected() {
        let codec = MlaCodec::<f64>::new(tiny(), 1).unwrap();
        let x = Tensor::zeros(&[1, 4, 100]);
        assert!(matches!(codec.predict(&x), Err(Error::Dimension(_))));
        let wrong_channels = Tensor::zeros(&[1, 3, 64]);
        assert!(matches!(
            codec.predict(&wrong_channels),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_bottlenecks() {
        let codec = MlaCodec::<f64>::new(tiny(), 3).unwrap();
        let tape = Tape::new();
        let p = codec.params().bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 4, 64]));
        for v in codec.encode(&tape, &p, x).unwrap() {
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_decoder_emits_head_bias() {
        let mut codec = MlaCodec::<f64>::new(tiny(), 5).unwrap();
        for (name, t) in codec.params_mut().iter_mut() {
            if name.starts_with("dec.") || name == "head.kernel" {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if name == "head.bias" {
                t.data_mut()[0] = 0.37;
            }
        }
        let x = Tensor::from_fn(&[2, 4, 64], |i| (i as f64 * 0.37).sin());
        let y = codec.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 64]);
        assert!(y.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn identical_batch_rows_match() {
        let codec = MlaCodec::<f64>::new(tiny(), 9).unwrap();
        let row: Vec<f64> = (0..4 * 64).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut data = row.clone();
        data.extend(&row);
        let y = codec
            .predict(&Tensor::from_vec(vec![2, 4, 64], data).unwrap())
            .unwrap();
        assert_eq!(&y.data()[..64], &y.data()[64..]);
    }

    #[test]
    fn parameter_names_are_stable() {
        let codec = MlaCodec::<f64>::new(tiny(), 0).unwrap();
        let names: Vec<&str> = codec.params().iter().map(|(n, _)| n).collect();
        assert_eq!(names.first(), Some(&"enc.0.kernel"));
        assert!(names.contains(&"dec.3.bias"));
        assert_eq!(names.last(), Some(&"head.bias"));
        assert_eq!(names.len(), 2 * (ENCODER_STAGES + DECODER_STAGES + 1));
    }
}
