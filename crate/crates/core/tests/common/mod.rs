#![allow(dead_code)]

use std::sync::OnceLock;

use cislunar_core::family::{self, ContinuationSettings, CorrectorSettings, FamilyCatalog, FamilyTag};
use cislunar_core::model::{self, FitSettings, MprModel};
use cislunar_core::{LibrationIndex, SystemParams};

pub const LYAPUNOV_MEMBERS: usize = 40;

/// A short L1 Lyapunov catalog shared by the tests of one binary.
pub fn lyapunov() -> &'static FamilyCatalog {
    static CATALOG: OnceLock<FamilyCatalog> = OnceLock::new();
    CATALOG.get_or_init(|| {
        let tag = FamilyTag::lyapunov(LibrationIndex::L1);
        family::generate_family(
            &tag,
            LYAPUNOV_MEMBERS,
            &CorrectorSettings::default(),
            &ContinuationSettings::default(),
            &SystemParams::default(),
        )
        .unwrap()
        .catalog
    })
}

pub fn lyapunov_model() -> &'static MprModel {
    static MODEL: OnceLock<MprModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let settings = FitSettings {
            degree: model::LYAPUNOV_DEGREE,
            parts: 2,
            samples: 100,
            holdout: 0.0,
        };
        model::fit_family(lyapunov(), &settings).unwrap()
    })
}
