use rand::Rng;

use super::signal::{add_noise_at, add_reverb};
use super::{AugmentCorpus, NoiseClass, WavAugConfig};
use crate::error::{Error, Result};
use crate::frontend::Waveform;

/// The random choices behind one augmented view.
#[derive(Clone, Debug, PartialEq)]
pub struct WavAugDraw {
    /// Index into `corpus.rirs`.
    pub reverb: Option<usize>,
    pub noise: Option<NoiseDraw>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub class: NoiseClass,
    /// Index into the class's list.
    pub index: usize,
    pub snr_db: f64,
    /// Start sample in the (looped) noise file.
    pub offset: usize,
}

impl WavAugDraw {
    pub fn sample<R: Rng + ?Sized>(
        corpus: &AugmentCorpus,
        cfg: &WavAugConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let reverb = if rng.random::<f64>() < cfg.reverb_prob {
            if corpus.rirs.is_empty() {
                return Err(Error::Augment("reverberation enabled but no RIRs loaded".into()));
            }
            Some(rng.random_range(0..corpus.rirs.len()))
        } else {
            None
        };
        let noise = if rng.random::<f64>() < cfg.noise_prob {
            let total: f64 = cfg.class_probs.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut class = NoiseClass::ALL[2];
            for (c, &p) in NoiseClass::ALL.iter().zip(&cfg.class_probs) {
                if u < p {
                    class = *c;
                    break;
                }
                u -= p;
            }
            let list = corpus.list(class);
            if list.is_empty() {
                return Err(Error::Augment(format!("no {class} recordings loaded")));
            }
            let index = rng.random_range(0..list.len());
            let snrs = cfg.snr_list(class);
            if snrs.is_empty() {
                return Err(Error::Augment(format!("empty SNR list for {class}")));
            }
            let snr_db = snrs[rng.random_range(0..snrs.len())];
            let offset = rng.random_range(0..list[index].samples.len());
            Some(NoiseDraw {
                class,
                index,
                snr_db,
                offset,
            })
        } else {
            None
        };
        Ok(Self { reverb, noise })
    }

    /// Reverb first, then additive noise measured against the reverberant signal.
    pub fn apply(&self, w: &Waveform, corpus: &AugmentCorpus) -> Result<Waveform> {
        let mut out = match self.reverb {
            Some(i) => add_reverb(w, &corpus.rirs[i])?,
            None => w.clone(),
        };
        if let Some(n) = &self.noise {
            let noise = &corpus.list(n.class)[n.index];
            out = add_noise_at(&out, noise, n.snr_db, n.offset)?;
        }
        Ok(out)
    }
}

/// One progressively augmented view of `w`.
pub fn wavaug_view<R: Rng + ?Sized>(
    w: &Waveform,
    corpus: &AugmentCorpus,
    cfg: &WavAugConfig,
    rng: &mut R,
) -> Result<Waveform> {
    WavAugDraw::sample(corpus, cfg, rng)?.apply(w, corpus)
}
