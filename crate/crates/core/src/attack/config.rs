use crate::binio::checksum64;
use crate::captioner::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::SuccessCriterion;
use crate::numeric::LrSchedule;

/// Perturbation support: whole patches, or individual pixel locations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Budget {
    Patches(usize),
    SparsePixels(usize),
}

impl Budget {
    pub fn mode(&self) -> AttackMode {
        match self {
            Budget::Patches(_) => AttackMode::Patch,
            Budget::SparsePixels(_) => AttackMode::Sparse,
        }
    }

    /// Sparse budget covering `fraction` of an `image_size`² pixel grid.
    pub fn sparse_fraction(fraction: f64, image_size: usize) -> Budget {
        Budget::SparsePixels((fraction * (image_size * image_size) as f64).round() as usize)
    }

    /// `patch:N` or `sparse:K`.
    pub fn label(&self) -> String {
        match self {
            Budget::Patches(n) => format!("patch:{n}"),
            Budget::SparsePixels(k) => format!("sparse:{k}"),
        }
    }

    pub fn parse(s: &str) -> Result<Budget> {
        let bad = || Error::invalid(format!("budget {s:?} is not patch:N or sparse:K"));
        let (kind, n) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        match kind.trim() {
            "patch" => Ok(Budget::Patches(n)),
            "sparse" => Ok(Budget::SparsePixels(n)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackMode {
    Patch,
    Sparse,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::Patch => "patch",
            AttackMode::Sparse => "sparse",
        }
    }
}

/// How the LM and attention gradients are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradientCombine {
    /// `g_lm + alpha * g_att`
    Additive,
    /// `(1 - alpha) * g_lm + alpha * g_att`
    Convex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub budget: Budget,
    /// Attention-loss weight.
    pub alpha: f64,
    pub combine: GradientCombine,
    /// Encoder layer (0-indexed) whose attention ranks patches.
    pub selection_layer: usize,
    /// Leading encoder layers summed into the attention loss.
    pub atten_loss_layers: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lr_step: u64,
    pub lr_gamma: f64,
    /// Reference images per optimization step.
    pub batch: usize,
    pub clamp: (f64, f64),
    /// Half-width of the uniform initialization of Delta.
    pub init_scale: f64,
    pub eval_every: usize,
    pub patience: usize,
    /// Sparse mode: iterations between top-k projections.
    pub project_every: usize,
    pub criterion: SuccessCriterion,
    pub seed: u64,
}

impl AttackConfig {
    /// Patch-level defaults.
    pub fn patch(n_patches: usize) -> Self {
        AttackConfig {
            budget: Budget::Patches(n_patches),
            alpha: 0.005,
            combine: GradientCombine::Additive,
            selection_layer: 4,
            atten_loss_layers: 6,
            iterations: 150,
            lr: 0.8,
            lr_step: 30,
            lr_gamma: 0.95,
            batch: 15,
            clamp: (-1.0, 1.0),
            init_scale: 0.1,
            eval_every: 10,
            patience: 4,
            project_every: 10,
            criterion: SuccessCriterion::default(),
            seed: 0,
        }
    }

    /// Sparse defaults.
    pub fn sparse(k_pixels: usize) -> Self {
        AttackConfig {
            budget: Budget::SparsePixels(k_pixels),
            alpha: 0.002,
            iterations: 200,
            batch: 40,
            ..AttackConfig::patch(0)
        }
    }

    pub fn mode(&self) -> AttackMode {
        self.budget.mode()
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.lr_step, self.lr_gamma)
    }

    /// Collects every violated constraint.
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let mut problems = Vec::new();
        match self.budget {
            Budget::Patches(n) if n == 0 || n > model.num_patches() => {
                problems.push(format!("n_patches {n} outside 1..={}", model.num_patches()))
            }
            Budget::SparsePixels(k) if k == 0 || k > model.image_size * model.image_size => problems.push(format!(
                "sparse_k {k} outside 1..={}",
                model.image_size * model.image_size
            )),
            _ => {}
        }
        if self.selection_layer == 0 || self.selection_layer >= model.n_encoder_layers {
            problems.push(format!(
                "selection_layer {} outside 1..{}",
                self.selection_layer, model.n_encoder_layers
            ));
        }
        if self.atten_loss_layers > model.n_encoder_layers {
            problems.push(format!(
                "atten_loss_layers {} exceeds encoder depth {}",
                self.atten_loss_layers, model.n_encoder_layers
            ));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            problems.push(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        if let Err(e) = self.schedule() {
            problems.push(e.to_string());
        }
        if self.batch == 0 {
            problems.push("batch must be positive".into());
        }
        let (lo, hi) = self.clamp;
        if !(lo <= 0.0 && 0.0 <= hi) {
            problems.push(format!("clamp bounds ({lo}, {hi}) must contain zero"));
        }
        if !(self.init_scale >= 0.0) {
            problems.push("init_scale must be non-negative".into());
        }
        if self.eval_every == 0 || self.project_every == 0 {
            problems.push("eval_every and project_every must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Canonical `key=value` rendering, one per line.
    pub fn canonical(&self) -> String {
        format!(
            "budget={}\nalpha={:?}\ncombine={:?}\nselection_layer={}\natten_loss_layers={}\niterations={}\n\
             lr={:?}\nlr_step={}\nlr_gamma={:?}\nbatch={}\nclamp={:?},{:?}\ninit_scale={:?}\neval_every={}\n\
             patience={}\nproject_every={}\ncriterion={:?}\nseed={}\n",
            self.budget.label(),
            self.alpha,
            self.combine,
            self.selection_layer,
            self.atten_loss_layers,
            self.iterations,
            self.lr,
            self.lr_step,
            self.lr_gamma,
            self.batch,
            self.clamp.0,
            self.clamp.1,
            self.init_scale,
            self.eval_every,
            self.patience,
            self.project_every,
            self.criterion,
            self.seed,
        )
    }

    pub fn fingerprint(&self) -> u64 {
        checksum64(self.canonical().as_bytes())
    }
}
