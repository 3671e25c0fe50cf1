use crate::error::{Error, Result};
use crate::pfm::AlignmentMode;

/// Which fusion modules are active. Disabled modules own no parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModulesEnabled {
    pub pfm: bool,
    pub fm: bool,
    pub ifa: bool,
}

impl Default for ModulesEnabled {
    fn default() -> Self {
        ModulesEnabled {
            pfm: true,
            fm: true,
            ifa: true,
        }
    }
}

impl ModulesEnabled {
    /// Parses a comma-separated subset of `pfm, fm, ifa`; `none` disables all.
    pub fn parse(s: &str) -> Result<Self> {
        let mut m = ModulesEnabled {
            pfm: false,
            fm: false,
            ifa: false,
        };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "pfm" => m.pfm = true,
                "fm" => m.fm = true,
                "ifa" => m.ifa = true,
                "none" => {}
                other => return Err(Error::config("modules_enabled", format!("unknown module `{other}`"))),
            }
        }
        Ok(m)
    }

    pub fn to_list(self) -> String {
        let v: Vec<&str> = [(self.pfm, "pfm"), (self.fm, "fm"), (self.ifa, "ifa")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if v.is_empty() {
            "none".into()
        } else {
            v.join(",")
        }
    }

    /// `full` when everything is on, otherwise `no_<module>` for each disabled one.
    pub fn tag(self) -> String {
        let off: Vec<&str> = [(self.pfm, "pfm"), (self.fm, "fm"), (self.ifa, "ifa")]
            .into_iter()
            .filter_map(|(on, n)| (!on).then_some(n))
            .collect();
        if off.is_empty() {
            "full".into()
        } else {
            off.iter().map(|n| format!("no_{n}")).collect::<Vec<_>>().join("+")
        }
    }
}

/// Where the covariate modulation and memory alignment sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionPlacement {
    /// Once, before the block stack.
    #[default]
    Once,
    /// At the start of every block.
    PerBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub t_in: usize,
    pub k_out: usize,
    pub hw: usize,
    pub hidden_hw: usize,
    pub c_emb: usize,
    pub depth_l: usize,
    pub n_blocks: usize,
    pub memory_slots: usize,
    pub lambda: f64,
    pub modules: ModulesEnabled,
    pub afno_bias: bool,
    pub mlp_ratio: usize,
    pub fusion_placement: FusionPlacement,
    pub alignment_mode: AlignmentMode,
    pub enc_channels: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_in: 5,
            k_out: 20,
            hw: 128,
            hidden_hw: 32,
            c_emb: 32,
            depth_l: 6,
            n_blocks: 4,
            memory_slots: 240,
            lambda: 0.57,
            modules: ModulesEnabled::default(),
            afno_bias: true,
            mlp_ratio: 1,
            fusion_placement: FusionPlacement::Once,
            alignment_mode: AlignmentMode::PerBin,
            enc_channels: [16, 32, 32],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_in", self.t_in),
            ("k_out", self.k_out),
            ("hw", self.hw),
            ("hidden_hw", self.hidden_hw),
            ("c_emb", self.c_emb),
            ("n_blocks", self.n_blocks),
            ("memory_slots", self.memory_slots),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.enc_channels.contains(&0) {
            return Err(Error::config("enc_channels", "every stage needs at least one channel"));
        }
        if self.hidden_hw < 2 {
            return Err(Error::config("hidden_hw", "must be at least 2"));
        }
        if self.hw % self.hidden_hw != 0 || !(self.hw / self.hidden_hw).is_power_of_two() || self.hw / self.hidden_hw > 16 {
            return Err(Error::config("hidden_hw", format!("hw / hidden_hw must be 1, 2, 4, 8 or 16 (hw = {}, hidden_hw = {})", self.hw, self.hidden_hw)));
        }
        if self.c_emb % self.n_blocks != 0 {
            return Err(Error::config("n_blocks", format!("must divide c_emb = {}", self.c_emb)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }

    /// `log2(hw / hidden_hw)`.
    pub fn down_log2(&self) -> usize {
        (self.hw / self.hidden_hw).trailing_zeros() as usize
    }

    pub fn tag(&self) -> String {
        self.modules.tag()
    }

    /// Every architecture key with its canonical string form, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let e = self.enc_channels;
        vec![
            ("t_in", self.t_in.to_string()),
            ("k_out", self.k_out.to_string()),
            ("hw", self.hw.to_string()),
            ("hidden_hw", self.hidden_hw.to_string()),
            ("c_emb", self.c_emb.to_string()),
            ("depth_l", self.depth_l.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("memory_slots", self.memory_slots.to_string()),
            ("lambda", format!("{:?}", self.lambda)),
            ("modules_enabled", self.modules.to_list()),
            ("afno_bias", self.afno_bias.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            (
                "fusion_placement",
                match self.fusion_placement {
                    FusionPlacement::Once => "once",
                    FusionPlacement::PerBlock => "per_block",
                }
                .into(),
            ),
            (
                "alignment_mode",
                match self.alignment_mode {
                    AlignmentMode::PerBin => "per_bin",
                    AlignmentMode::PerChannel => "per_channel",
                }
                .into(),
            ),
            ("enc_channels", format!("{},{},{}", e[0], e[1], e[2])),
        ]
    }

    /// Apply one `key = value` pair; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let uint = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::config(key, format!("expected a non-negative integer, got `{v}`")));
        let boolean = |v: &str| match v.trim() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
        };
        match key {
            "t_in" => self.t_in = uint(value)?,
            "k_out" => self.k_out = uint(value)?,
            "hw" => self.hw = uint(value)?,
            "hidden_hw" => self.hidden_hw = uint(value)?,
            "c_emb" => self.c_emb = uint(value)?,
            "depth_l" => self.depth_l = uint(value)?,
            "n_blocks" => self.n_blocks = uint(value)?,
            "memory_slots" => self.memory_slots = uint(value)?,
            "mlp_ratio" => self.mlp_ratio = uint(value)?,
            "lambda" => {
                self.lambda = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(key, format!("expected a number, got `{value}`")))?
            }
            "modules_enabled" => self.modules = ModulesEnabled::parse(value)?,
            "afno_bias" => self.afno_bias = boolean(value)?,
            "fusion_placement" => {
                self.fusion_placement = match value.trim() {
                    "once" => FusionPlacement::Once,
                    "per_block" => FusionPlacement::PerBlock,
                    v => return Err(Error::config(key, format!("expected once or per_block, got `{v}`"))),
                }
            }
            "alignment_mode" => {
                self.alignment_mode = match value.trim() {
                    "per_bin" => AlignmentMode::PerBin,
                    "per_channel" => AlignmentMode::PerChannel,
                    v => return Err(Error::config(key, format!("expected per_bin or per_channel, got `{v}`"))),
                }
            }
            "enc_channels" => {
                let v: Vec<usize> = value.split(',').map(uint).collect::<Result<_>>()?;
                self.enc_channels = v
                    .try_into()
                    .map_err(|_| Error::config(key, "expected three comma-separated channel counts"))?;
            }
            _ => return Err(Error::config(key, "unknown [model] key")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip_through_set() {
        let mut c = ModelConfig {
            modules: ModulesEnabled {
                pfm: false,
                fm: true,
                ifa: false,
            },
            fusion_placement: FusionPlacement::PerBlock,
            lambda: 0.55,
            ..ModelConfig::default()
        };
        c.enc_channels = [4, 8, 8];
        let mut d = ModelConfig::default();
        for (k, v) in c.to_pairs() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert_eq!(c.tag(), "no_pfm+no_ifa");
    }

    #[test]
    fn validation_names_key() {
        let c = ModelConfig {
            hidden_hw: 48,
            ..ModelConfig::default()
        };
        match c.validate() {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "hidden_hw"),
            other => panic!("{other:?}"),
        }
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(ModelConfig::default().down_log2(), 2);
    }
}
