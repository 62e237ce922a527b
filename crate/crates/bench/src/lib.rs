//! Shared fixtures for the pipeline benchmarks.

use daltest::{
    decompose, AnomalyRegion, CovarianceModel, Decomposition, Detector, FilterSpec, PlanSpec, ReconstructionPlan,
    Result, TestInstance, UNetConfig, Weights,
};

/// A null instance on the default 8×8 network with a nonempty region.
pub struct Fixture {
    pub weights: Weights,
    pub instance: TestInstance,
    pub plan: ReconstructionPlan,
}

impl Fixture {
    /// Tries data seeds from `seed` upward until the region is nonempty.
    pub fn new(seed: u64) -> Result<Self> {
        let weights = Weights::init(UNetConfig::default(), seed)?;
        let n = weights.config.pixels();
        let cov = CovarianceModel::identity(n);
        for s in seed.. {
            let images = daltest::sample_noise(&cov, 2, s)?;
            let instance = TestInstance::new(images[0].clone(), images[1].clone(), cov)?;
            let plan = ReconstructionPlan::new(PlanSpec::default().with_seed(s), n)?;
            let fixture = Self {
                weights: weights.clone(),
                instance,
                plan,
            };
            if !fixture.region()?.is_empty() {
                return Ok(fixture);
            }
        }
        unreachable!()
    }

    pub fn detector(&self) -> Detector<'_> {
        Detector::new(self.plan.clone(), &self.weights, FilterSpec::default(), 0.8).expect("valid fixture")
    }

    pub fn region(&self) -> Result<AnomalyRegion> {
        self.detector().detect(&self.instance.x)
    }

    pub fn decomposition(&self) -> Result<Decomposition> {
        decompose(&self.instance, &self.region()?)
    }
}
