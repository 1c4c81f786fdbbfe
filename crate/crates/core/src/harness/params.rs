use serde::Serialize;

use crate::error::Result;
use crate::model::{Mhn, ModelSpec, ParamBreakdown};

/// Parameter accounting for one spec, plus the PVR sharing comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ParamsReport {
    pub breakdown: ParamBreakdown,
    /// Totals with the PVR encoder shared across levels and with one encoder per level.
    pub shared_total: usize,
    pub unshared_total: usize,
    /// Scalars in one PVR encoder layer.
    pub encoder: usize,
    /// Levels that run PVR.
    pub pvr_levels: usize,
}

impl ParamsReport {
    /// `unshared - shared`, which equals `(levels - 1) * encoder`.
    pub fn sharing_delta(&self) -> usize {
        self.unshared_total - self.shared_total
    }

    pub fn table(&self) -> String {
        let b = &self.breakdown;
        let mut s = String::new();
        for (name, n) in [
            ("visual", b.visual),
            ("text", b.text),
            ("rmi", b.rmi),
            ("pvr", b.pvr),
            ("decoder", b.decoder),
            ("total", b.total),
        ] {
            s += &format!("{name:<22}{n:>12}\n");
        }
        s += &format!("{:<22}{:>12}\n", "pvr encoder layer", self.encoder);
        s += &format!("{:<22}{:>12}\n", "total, shared pvr", self.shared_total);
        s += &format!("{:<22}{:>12}\n", "total, unshared pvr", self.unshared_total);
        s
    }
}

pub fn params_report(spec: &ModelSpec) -> Result<ParamsReport> {
    let count = |share: bool| -> Result<(usize, Mhn, ParamBreakdown)> {
        let mut s = spec.clone();
        s.model.share_pvr = share;
        let (m, store) = Mhn::new(s, 0)?;
        let b = m.param_breakdown(&store);
        Ok((b.total, m, b))
    };
    let (shared_total, _, _) = count(true)?;
    let (unshared_total, _, _) = count(false)?;
    let (_, model, breakdown) = count(spec.model.share_pvr)?;
    Ok(ParamsReport {
        breakdown,
        shared_total,
        unshared_total,
        encoder: model.encoder_param_count(),
        pvr_levels: if spec.model.high_level_only_pvr {
            1
        } else {
            spec.model.scales
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::AnswerSpace;
    use crate::model::ModelConfig;

    fn spec(scales: usize) -> ModelSpec {
        ModelSpec {
            model: ModelConfig {
                d: 16,
                heads: 2,
                scales,
                word_dim: 8,
                ..ModelConfig::default()
            },
            app_dim: 6,
            mot_dim: 5,
            vocab_size: 20,
            answer: AnswerSpace::Count { min: 1, max: 5 },
        }
    }

    #[test]
    fn sharing_delta_is_levels_minus_one_encoders() {
        for n in 2..=4 {
            let r = params_report(&spec(n)).unwrap();
            assert_eq!(r.sharing_delta(), (n - 1) * r.encoder);
            assert!(r.shared_total < r.unshared_total);
        }
    }

    #[test]
    fn table_lists_every_module() {
        let t = params_report(&spec(3)).unwrap().table();
        for k in [
            "visual", "text", "rmi", "pvr", "decoder", "total", "unshared",
        ] {
            assert!(t.contains(k), "{t}");
        }
    }
}
