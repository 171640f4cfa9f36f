//! Synthetic multi-phase abdominal phantoms and the role datasets built from them.

mod dataset;
mod generate;
mod spec;

pub use dataset::{
    case_id, case_seed, generate_all, generate_dataset, DatasetIndex, GenConfig, RoleConfig,
    GEN_CONFIG_VERSION,
};
pub(crate) use generate::mix;
pub use generate::{generate_case, PhantomCase};
pub use spec::{
    DatasetRole, DuctSpec, EnhancementTable, OrganSpec, PancreasSpec, PhantomSpec, PhaseIntensity,
    Structure, TumorLocation, TumorSpec, VesselSpec,
};
