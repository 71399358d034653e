//! The demoiréing network: shallow features, optional moiré decoupling,
//! spatio-temporal refinement and the RAW-to-sRGB output head.

pub mod dmad;
pub mod layers;
pub mod stad;
pub mod window;

use crate::autodiff::{Ctx, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use layers::{conv, Init};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use dmad::DmadOutput;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    /// Blocks per decoupling branch.
    pub n_m: usize,
    pub mcb_heads: usize,
    pub n_r: usize,
    pub n_s: usize,
    pub window_t: usize,
    pub window_k: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            n_m: 4,
            mcb_heads: 1,
            n_r: 4,
            n_s: 5,
            window_t: 2,
            window_k: 7,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for desk-scale training runs.
    pub fn desk() -> Self {
        ModelConfig {
            n_r: 2,
            n_s: 2,
            ..Default::default()
        }
    }

    pub const KEYS: [&'static str; 9] = [
        "channels", "n_m", "mcb_heads", "n_r", "n_s", "window_t", "window_k", "heads", "mlp_ratio",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))?;
        let slot = match key {
            "channels" => &mut self.channels,
            "n_m" => &mut self.n_m,
            "mcb_heads" => &mut self.mcb_heads,
            "n_r" => &mut self.n_r,
            "n_s" => &mut self.n_s,
            "window_t" => &mut self.window_t,
            "window_k" => &mut self.window_k,
            "heads" => &mut self.heads,
            "mlp_ratio" => &mut self.mlp_ratio,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        };
        *slot = v;
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("channels", self.channels),
            ("n_m", self.n_m),
            ("mcb_heads", self.mcb_heads),
            ("n_r", self.n_r),
            ("n_s", self.n_s),
            ("window_t", self.window_t),
            ("window_k", self.window_k),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c < 4 {
            return Err(Error::Config(format!("channels must be at least 4, got {c}")));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Config(format!("channels {c} not divisible by heads {}", self.heads)));
        }
        if self.mcb_heads == 0 || c % self.mcb_heads != 0 {
            return Err(Error::Config(format!("channels {c} not divisible by mcb_heads {}", self.mcb_heads)));
        }
        if self.n_m == 0 || self.window_t == 0 || self.window_k == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("n_m, window and mlp_ratio must be positive".into()));
        }
        if self.window_t > 3 {
            return Err(Error::Config(format!("temporal window {} exceeds 3 frames", self.window_t)));
        }
        Ok(())
    }

    pub fn window(&self) -> [usize; 3] {
        [self.window_t, self.window_k, self.window_k]
    }

    /// Bottleneck width of the channel-attention MLPs.
    pub fn reduced(&self) -> usize {
        (self.channels / 4).max(1)
    }
}

/// Training stage: the first bypasses moiré decoupling entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::usage(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// All parameters, named by block path. Decoupling parameters start with
/// `dmad.`, the refinement stack with `stad.`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let c = cfg.channels;
    init.conv("sfe", 3, 4, c)?;
    dmad::init_dmad(&mut init, cfg)?;
    stad::init_stad(&mut init, cfg)?;
    init.conv("eib.c1", 3, c, c)?;
    init.conv("eib.c2", 3, c, 12)?;
    Ok(store)
}

/// Checks that a loaded store carries exactly the parameters `cfg` needs.
pub fn check_params(store: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    let want = init_params(cfg, 0)?;
    for (name, p) in want.iter() {
        let have = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("weights lack parameter {name}")))?;
        if have.value.shape() != p.value.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: stored shape {:?}, config needs {:?}",
                have.value.shape(),
                p.value.shape()
            )));
        }
    }
    if store.len() != want.len() {
        return Err(Error::Config(format!(
            "weights hold {} parameters, config needs {}",
            store.len(),
            want.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct MochaOutput {
    /// `[2H, 2W, 3]` sRGB estimate of the center frame.
    pub rgb: Var,
    pub f0: Var,
    pub f_d: Var,
    pub dmad: Option<DmadOutput>,
}

/// Full forward pass on a `[3, H, W, 4]` packed-RAW triplet.
pub fn mocha_forward(ctx: &mut Ctx, i_raw: Var, cfg: &ModelConfig, stage: Stage) -> Result<MochaOutput> {
    let shape = ctx.shape(i_raw).to_vec();
    match shape.as_slice() {
        [3, _, _, 4] => {}
        _ => return Err(Error::dim(format!("expected a [3,H,W,4] RAW triplet, got {shape:?}"))),
    }
    let f0 = conv(ctx, i_raw, "sfe", 1)?;
    let (f_ma, dm) = match stage {
        Stage::One => (f0, None),
        Stage::Two => {
            let out = dmad::dmad_forward(ctx, f0, cfg)?;
            (out.f_ma, Some(out))
        }
    };
    let f_d = stad::stad_forward(ctx, f_ma, cfg)?;
    let rgb = eib(ctx, f_d, f0)?;
    Ok(MochaOutput {
        rgb,
        f0,
        f_d,
        dmad: dm,
    })
}

/// Output head: center-frame skip sum, two convs and a 2x depth-to-space
/// to `[2H, 2W, 3]` sRGB.
pub fn eib(ctx: &mut Ctx, f_d: Var, f0: Var) -> Result<Var> {
    let fd_center = ctx.index_outer(f_d, 1)?;
    let f0_center = ctx.index_outer(f0, 1)?;
    let skip = ctx.add(fd_center, f0_center)?;
    let y = conv(ctx, skip, "eib.c1", 1)?;
    let y = conv(ctx, y, "eib.c2", 1)?;
    layers::pixel_shuffle(ctx, y, 2)
}

/// Op names that would indicate explicit frame alignment.
pub const ALIGNMENT_OPS: [&str; 5] = ["warp", "flow", "offset", "deform", "grid_sample"];

#[cfg(test)]
mod tests {
    use super::testutil::randomize;
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 8,
            n_m: 1,
            n_r: 1,
            n_s: 2,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    fn raw(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[3, h, w, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn forward(store: &ParamStore, cfg: &ModelConfig, x: &Tensor, stage: Stage) -> (Tensor, Tape) {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store);
        let xv = ctx.input(x.clone());
        let out = mocha_forward(&mut ctx, xv, cfg, stage).unwrap();
        let rgb = ctx.value(out.rgb).clone();
        (rgb, tape)
    }

    #[test]
    fn output_doubles_resolution() {
        let cfg = ModelConfig::desk();
        let store = init_params(&cfg, 0).unwrap();
        for (h, w) in [(8, 8), (16, 8), (8, 32), (16, 16)] {
            for stage in [Stage::One, Stage::Two] {
                let (rgb, _) = forward(&store, &cfg, &raw(h, w, 1), stage);
                assert_eq!(rgb.shape(), &[2 * h, 2 * w, 3]);
            }
        }
    }

    #[test]
    fn stage_one_ignores_decoupling_parameters() {
        let cfg = small();
        let mut store = init_params(&cfg, 0).unwrap();
        randomize(&mut store, "stad.", 2);
        let x = raw(8, 8, 3);
        let (a, _) = forward(&store, &cfg, &x, Stage::One);
        let (a2, _) = forward(&store, &cfg, &x, Stage::Two);
        randomize(&mut store, "dmad.", 4);
        let (b, _) = forward(&store, &cfg, &x, Stage::One);
        let (b2, _) = forward(&store, &cfg, &x, Stage::Two);
        assert_eq!(a, b);
        assert_ne!(a2, b2);
    }

    #[test]
    fn graph_has_no_alignment_ops() {
        let cfg = small();
        let store = init_params(&cfg, 0).unwrap();
        let (_, tape) = forward(&store, &cfg, &raw(8, 8, 5), Stage::Two);
        let hist = tape.op_histogram();
        for name in hist.keys() {
            assert!(!ALIGNMENT_OPS.iter().any(|a| name.contains(a)), "{name}");
        }
        assert!(hist["softmax"] > 0 && hist["fft2"] > 0);
    }

    #[test]
    fn wrong_frame_count_is_a_dimension_error() {
        let cfg = small();
        let store = init_params(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        for shape in [[2, 8, 8, 4], [3, 8, 8, 3]] {
            let x = ctx.input(Tensor::zeros(&shape));
            assert!(matches!(mocha_forward(&mut ctx, x, &cfg, Stage::One), Err(Error::Dimension(_))));
        }
    }

    #[test]
    fn init_is_seeded_and_names_are_grouped() {
        let cfg = small();
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        let c = init_params(&cfg, 10).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.0 == y.0 && x.1.value == y.1.value));
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x.1.value != y.1.value));
        assert!(a.names().all(|n| ["sfe.", "dmad.", "stad.", "eib."].iter().any(|p| n.starts_with(p))));
        check_params(&a, &cfg).unwrap();
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let cfg = small();
        let store = init_params(&cfg, 0).unwrap();
        let wider = ModelConfig { channels: 16, ..small() };
        assert!(matches!(check_params(&store, &wider), Err(Error::Config(_))));
        let deeper = ModelConfig { n_r: 2, ..small() };
        assert!(matches!(check_params(&store, &deeper), Err(Error::Config(_))));
        let mut extra = store.clone();
        extra.insert("stray", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(check_params(&extra, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn config_keys_and_validation() {
        let mut cfg = ModelConfig::default();
        assert_eq!((cfg.n_r, cfg.n_s, cfg.window(), cfg.heads), (4, 5, [2, 7, 7], 4));
        cfg.set("channels", "12").unwrap();
        assert_eq!(cfg.channels, 12);
        assert!(matches!(cfg.set("depth", "3"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("n_r", "-1"), Err(Error::Config(_))));
        assert_eq!(cfg.entries().len(), ModelConfig::KEYS.len());
        cfg.set("channels", "10").unwrap();
        assert!(cfg.validate().is_err());
        let bad = ModelConfig { window_t: 4, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_numbers() {
        assert_eq!(Stage::from_number(2).unwrap(), Stage::Two);
        assert_eq!(Stage::One.number(), 1);
        assert!(matches!(Stage::from_number(3), Err(Error::Usage(_))));
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matching(store: &ParamStore, prefix: &str) -> Vec<(String, Vec<usize>)> {
        store
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, p)| (n.to_string(), p.value.shape().to_vec()))
            .collect()
    }

    pub fn zero_prefix(store: &mut ParamStore, prefix: &str) {
        for (n, shape) in matching(store, prefix) {
            store.set_value(&n, Tensor::zeros(&shape)).unwrap();
        }
    }

    pub fn randomize(store: &mut ParamStore, prefix: &str, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (n, shape) in matching(store, prefix) {
            store.set_value(&n, Tensor::randn(&shape, &mut rng).scale(0.5)).unwrap();
        }
    }

    pub fn set(store: &mut ParamStore, name: &str, f: impl Fn(&[usize]) -> f64) {
        let shape = store.value(name).unwrap().shape().to_vec();
        store.set_value(name, Tensor::from_fn(&shape, f)).unwrap();
    }
}
