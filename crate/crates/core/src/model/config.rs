use std::fmt;
use std::str::FromStr;

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::filterbank::FilterbankConfig;
use crate::kv::{join_list, KeyValues};

/// Which encoder branches feed the shared core and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Spectral and waveform encoders merged at the core; mask output.
    YNet,
    /// Spectral encoder only; mask output.
    UNetSpec,
    /// Learnable-spectrogram encoder only; direct magnitude output.
    UNetWave,
}

impl Architecture {
    pub fn has_spectral(self) -> bool {
        matches!(self, Architecture::YNet | Architecture::UNetSpec)
    }

    pub fn has_waveform(self) -> bool {
        matches!(self, Architecture::YNet | Architecture::UNetWave)
    }

    pub fn branch_count(self) -> usize {
        self.has_spectral() as usize + self.has_waveform() as usize
    }

    /// True when the head output is a mask applied to the mixture, false
    /// when it is the estimated magnitude itself.
    pub fn outputs_mask(self) -> bool {
        self != Architecture::UNetWave
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::YNet => "ynet",
            Architecture::UNetSpec => "unet_spec",
            Architecture::UNetWave => "unet_wave",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "ynet" => Ok(Architecture::YNet),
            "unet_spec" => Ok(Architecture::UNetSpec),
            "unet_wave" => Ok(Architecture::UNetWave),
            _ => Err(Error::config(format!(
                "unknown architecture `{s}` (expected ynet, unet_spec or unet_wave)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub base_channels: usize,
    pub depth: usize,
    /// Dilation of both 3x3 convolutions in each encoder level.
    pub encoder_dilations: Vec<usize>,
    pub dropout: f64,
    pub hardtanh_lo: f64,
    pub hardtanh_hi: f64,
    /// Slope of the leaky ReLU in the waveform encoder.
    pub leaky_slope: f64,
    pub stft: StftConfig,
    pub time_bins: usize,
    pub filterbank: FilterbankConfig,
    /// Feed `ln(1 + magnitude)` to the spectral branch instead of the raw
    /// magnitude. The mask is still applied to the raw magnitude.
    pub log_mag: bool,
    /// Keep the concatenated width through the core instead of reducing it
    /// to one branch's width at the first core conv.
    pub core_preserve_width: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::YNet,
            base_channels: 16,
            depth: 5,
            encoder_dilations: vec![1, 2, 4, 8, 16],
            dropout: 0.1,
            hardtanh_lo: 0.0,
            hardtanh_hi: 1.0,
            leaky_slope: 0.01,
            stft: StftConfig::default(),
            time_bins: 128,
            filterbank: FilterbankConfig::default(),
            log_mag: false,
            core_preserve_width: false,
        }
    }
}

const KEYS: &[&str] = &[
    "architecture",
    "base_channels",
    "depth",
    "encoder_dilations",
    "dropout",
    "hardtanh_lo",
    "hardtanh_hi",
    "leaky_slope",
    "window_len",
    "hop",
    "freq_bins",
    "time_bins",
    "fb_kernel_len",
    "fb_dilations",
    "fb_kernels",
    "fb_stride",
    "fb_leaky_slope",
    "log_mag",
    "core_preserve_width",
];

impl ModelConfig {
    pub fn with_architecture(mut self, arch: Architecture) -> Self {
        self.architecture = arch;
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    /// Scaled-down geometry (64 x 32 spectrogram from a 128-sample window)
    /// with the full five-level structure, for gradient checks and fast
    /// tests.
    pub fn miniature(arch: Architecture, base: usize) -> Self {
        ModelConfig {
            architecture: arch,
            base_channels: base,
            depth: 5,
            encoder_dilations: vec![1, 2, 4, 8, 16],
            dropout: 0.0,
            stft: StftConfig {
                window_len: 128,
                hop: 32,
                freq_bins: 64,
            },
            time_bins: 32,
            filterbank: FilterbankConfig {
                kernel_len: 128,
                dilation_rates: vec![1, 2, 4, 8, 16],
                kernels_per_group: vec![32, 16, 8, 4, 4],
                stride: 32,
                target_frames: 32,
                leaky_slope: 0.01,
            },
            ..ModelConfig::default()
        }
    }

    pub fn freq_bins(&self) -> usize {
        self.stft.freq_bins
    }

    /// Waveform samples per model input window.
    pub fn window_samples(&self) -> usize {
        self.stft.samples_for(self.time_bins)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be at least 1"));
        }
        if self.encoder_dilations.len() != self.depth || self.encoder_dilations.contains(&0) {
            return Err(Error::config(format!(
                "need {} positive encoder dilations, got {:?}",
                self.depth, self.encoder_dilations
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.hardtanh_lo.partial_cmp(&self.hardtanh_hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::config("hardtanh bounds need lo < hi"));
        }
        self.stft.validate()?;
        let scale = 1usize << self.depth;
        if self.time_bins == 0 || !self.freq_bins().is_multiple_of(scale) || !self.time_bins.is_multiple_of(scale) {
            return Err(Error::config(format!(
                "spectrogram {}x{} not divisible by 2^{}",
                self.freq_bins(),
                self.time_bins,
                self.depth
            )));
        }
        if self.architecture.has_waveform() {
            self.filterbank.validate(self.freq_bins())?;
            if self.filterbank.target_frames != self.time_bins {
                return Err(Error::config("filterbank frames must equal time_bins"));
            }
            self.filterbank.framing(self.window_samples())?;
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("architecture", self.architecture);
        kv.set("base_channels", self.base_channels);
        kv.set("depth", self.depth);
        kv.set("encoder_dilations", join_list(&self.encoder_dilations));
        kv.set("dropout", self.dropout);
        kv.set("hardtanh_lo", self.hardtanh_lo);
        kv.set("hardtanh_hi", self.hardtanh_hi);
        kv.set("leaky_slope", self.leaky_slope);
        kv.set("window_len", self.stft.window_len);
        kv.set("hop", self.stft.hop);
        kv.set("freq_bins", self.stft.freq_bins);
        kv.set("time_bins", self.time_bins);
        kv.set("fb_kernel_len", self.filterbank.kernel_len);
        kv.set("fb_dilations", join_list(&self.filterbank.dilation_rates));
        kv.set("fb_kernels", join_list(&self.filterbank.kernels_per_group));
        kv.set("fb_stride", self.filterbank.stride);
        kv.set("fb_leaky_slope", self.filterbank.leaky_slope);
        kv.set("log_mag", self.log_mag);
        kv.set("core_preserve_width", self.core_preserve_width);
        kv
    }

    /// Reads a config from key/values; missing keys keep their defaults.
    /// Keys outside the model vocabulary are ignored here so that training
    /// configs can carry their own keys in the same file.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = ModelConfig::default();
        if let Some(a) = kv.get_str("architecture") {
            c.architecture = a.parse()?;
        }
        macro_rules! field {
            ($key:literal, $target:expr) => {
                if let Some(v) = kv.get($key)? {
                    $target = v;
                }
            };
        }
        macro_rules! list {
            ($key:literal, $target:expr) => {
                if let Some(v) = kv.get_list($key)? {
                    $target = v;
                }
            };
        }
        field!("base_channels", c.base_channels);
        field!("depth", c.depth);
        list!("encoder_dilations", c.encoder_dilations);
        field!("dropout", c.dropout);
        field!("hardtanh_lo", c.hardtanh_lo);
        field!("hardtanh_hi", c.hardtanh_hi);
        field!("leaky_slope", c.leaky_slope);
        field!("window_len", c.stft.window_len);
        field!("hop", c.stft.hop);
        field!("freq_bins", c.stft.freq_bins);
        field!("time_bins", c.time_bins);
        field!("fb_kernel_len", c.filterbank.kernel_len);
        list!("fb_dilations", c.filterbank.dilation_rates);
        list!("fb_kernels", c.filterbank.kernels_per_group);
        field!("fb_stride", c.filterbank.stride);
        field!("fb_leaky_slope", c.filterbank.leaky_slope);
        field!("log_mag", c.log_mag);
        field!("core_preserve_width", c.core_preserve_width);
        c.filterbank.target_frames = c.time_bins;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.to_key_values().to_text()
    }

    /// Strict parse of a stand-alone model config (checkpoint blobs).
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(KEYS)?;
        Self::from_key_values(&kv)
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        for arch in [Architecture::YNet, Architecture::UNetSpec, Architecture::UNetWave] {
            ModelConfig::miniature(arch, 2).validate().unwrap();
        }
        assert_eq!(ModelConfig::default().window_samples(), 67_072);
        assert_eq!(ModelConfig::miniature(Architecture::YNet, 2).window_samples(), 1120);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default().with_architecture(Architecture::UNetWave);
        c.dropout = 0.3;
        c.hardtanh_lo = -1.0;
        c.log_mag = true;
        c.core_preserve_width = true;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(ModelConfig::from_text("bogus=1").is_err());
    }

    #[test]
    fn invalid_configs() {
        let deep = ModelConfig {
            depth: 8,
            encoder_dilations: vec![1; 8],
            ..ModelConfig::default()
        };
        assert!(deep.validate().is_err(), "128 time bins not divisible by 256");
        let empty = ModelConfig {
            base_channels: 0,
            ..ModelConfig::default()
        };
        assert!(empty.validate().is_err());
        assert!("transformer".parse::<Architecture>().is_err());
        assert_eq!("unet-spec".parse::<Architecture>().unwrap(), Architecture::UNetSpec);
    }
}
