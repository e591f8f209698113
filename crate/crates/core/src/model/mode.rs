use std::fmt;
use std::str::FromStr;

/// Which parameters are added and which are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FineTuneMode {
    /// Everything frozen; evaluation only.
    Baseline,
    /// Only the mask decoder is trained.
    DecoderFt,
    Lora,
    /// Prefixes on every block.
    VptDeep,
    /// Prefixes on the first block only.
    VptShallow,
    Adapter,
    /// LoRA, deep prefixes and adapters under learned gates.
    MoPeft,
}

impl FineTuneMode {
    pub const ALL: [FineTuneMode; 7] = [
        FineTuneMode::Baseline,
        FineTuneMode::DecoderFt,
        FineTuneMode::Lora,
        FineTuneMode::VptDeep,
        FineTuneMode::VptShallow,
        FineTuneMode::Adapter,
        FineTuneMode::MoPeft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FineTuneMode::Baseline => "baseline",
            FineTuneMode::DecoderFt => "decoder_ft",
            FineTuneMode::Lora => "lora",
            FineTuneMode::VptDeep => "vpt_deep",
            FineTuneMode::VptShallow => "vpt_shallow",
            FineTuneMode::Adapter => "adapter",
            FineTuneMode::MoPeft => "mopeft",
        }
    }

    /// Column heading used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            FineTuneMode::Baseline => "Baseline",
            FineTuneMode::DecoderFt => "decoderFT",
            FineTuneMode::Lora => "LoRA",
            FineTuneMode::VptDeep => "VPT Deep",
            FineTuneMode::VptShallow => "VPT",
            FineTuneMode::Adapter => "Adapter",
            FineTuneMode::MoPeft => "MoPEFTs",
        }
    }

    pub fn tag(self) -> u32 {
        Self::ALL.iter().position(|&m| m == self).unwrap() as u32
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn has_lora(self) -> bool {
        matches!(self, FineTuneMode::Lora | FineTuneMode::MoPeft)
    }

    pub fn has_prefix(self) -> bool {
        matches!(
            self,
            FineTuneMode::VptDeep | FineTuneMode::VptShallow | FineTuneMode::MoPeft
        )
    }

    pub fn has_adapter(self) -> bool {
        matches!(self, FineTuneMode::Adapter | FineTuneMode::MoPeft)
    }

    pub fn has_gates(self) -> bool {
        self == FineTuneMode::MoPeft
    }

    pub fn decoder_trainable(self) -> bool {
        self != FineTuneMode::Baseline
    }

    pub fn trains(self) -> bool {
        self != FineTuneMode::Baseline
    }

    /// Block indices that receive a prefix for an `n`-block encoder.
    pub fn prefix_layers(self, n: usize) -> Vec<usize> {
        match self {
            FineTuneMode::VptShallow => vec![0],
            FineTuneMode::VptDeep | FineTuneMode::MoPeft => (0..n).collect(),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FineTuneMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
            format!("unknown mode `{s}` (expected one of {})", names.join(", "))
        })
    }
}
