use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub conv_channels: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub embed_dim: usize,
    /// Slices per volume; consumed as 2D input channels.
    pub input_depth: usize,
    /// `(height, width)` of each slice.
    pub input_hw: (usize, usize),
    /// Applied to the pooled features in training mode.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_channels: [64, 128, 256],
            kernel: 3,
            stride: 2,
            lstm_hidden: 256,
            lstm_layers: 1,
            embed_dim: 128,
            input_depth: 32,
            input_hw: (64, 64),
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.contains(&0) {
            return Err(Error::Config("conv_channels must be positive".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.lstm_layers != 1 {
            return Err(Error::Config(format!(
                "only a single LSTM layer is supported, got {}",
                self.lstm_layers
            )));
        }
        if self.lstm_hidden == 0 || self.embed_dim < 2 {
            return Err(Error::Config("lstm_hidden >= 1 and embed_dim >= 2 required".into()));
        }
        if self.input_depth == 0 || self.input_hw.0 == 0 || self.input_hw.1 == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn conv_out(&self, size: usize) -> usize {
        (size + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    /// `(h, w)` after each of the three convolutions.
    pub fn spatial_sizes(&self) -> [(usize, usize); 3] {
        let mut hw = self.input_hw;
        [(); 3].map(|_| {
            hw = (self.conv_out(hw.0), self.conv_out(hw.1));
            hw
        })
    }

    /// Configuration sized for a `(z, y, x)` scan with a small network.
    pub fn compact(input_depth: usize, input_hw: (usize, usize)) -> Self {
        Self {
            conv_channels: [8, 16, 32],
            lstm_hidden: 32,
            embed_dim: 32,
            input_depth,
            input_hw,
            ..Self::default()
        }
    }
}
