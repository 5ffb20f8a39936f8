use olor_core::harness::RollbackLevels;
use olor_core::{HostOptimizer, Method};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// Transformer-style runs: rollback on Adam.
    Vit,
    /// Convolutional-style runs: rollback on SGD with momentum.
    Cnn,
}

#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub family: Family,
    pub rollback: RollbackLevels,
}

impl Preset {
    pub fn method(&self) -> Method {
        match self.family {
            Family::Vit => Method::OlorAdam,
            Family::Cnn => Method::OlorSgd,
        }
    }

    pub fn host(&self) -> HostOptimizer {
        match self.family {
            Family::Vit => HostOptimizer::Adam,
            Family::Cnn => HostOptimizer::Sgd,
        }
    }

    /// Desk-scale base rate for the family's optimizer.
    pub fn base_lr(&self) -> f64 {
        match self.family {
            Family::Vit => 1e-3,
            Family::Cnn => 1e-2,
        }
    }
}

const fn preset(name: &'static str, family: Family, iota1: f64, gamma: f64) -> Preset {
    Preset {
        name,
        family,
        rollback: RollbackLevels {
            iota1,
            iota2: 0.0,
            gamma,
        },
    }
}

use Family::{Cnn, Vit};

pub const PRESETS: &[Preset] = &[
    preset("cifar100-vit-analog", Vit, 5e-3, 2.0),
    preset("cifar100-cnn-analog", Cnn, 5e-3, 2.0),
    preset("svhn-vit-analog", Vit, 5e-3, 2.0),
    preset("svhn-cnn-analog", Cnn, 1e-4, 2.0),
    preset("cub200-vit-analog", Vit, 5e-2, 2.0),
    preset("cub200-cnn-analog", Cnn, 1e-2, 2.0),
    preset("stanfordcars-vit-analog", Vit, 1e-2, 4.0),
    preset("stanfordcars-cnn-analog", Cnn, 1e-4, 2.0),
    preset("placeslt-vit-analog", Vit, 1e-1, 4.0),
    preset("placeslt-cnn-analog", Cnn, 1e-2, 4.0),
    preset("ip102-vit-analog", Vit, 1e-1, 1.0),
    preset("ip102-cnn-analog", Cnn, 5e-3, 1.0),
    preset("officehome-vit-analog", Vit, 1e-2, 1.0),
    preset("officehome-cnn-analog", Cnn, 1.0, 1.0),
    preset("pacs-vit-analog", Vit, 1e-1, 4.0),
    preset("pacs-cnn-analog", Cnn, 5e-2, 4.0),
    preset("coco2017-cnn-analog", Cnn, 1e-2, 2.0),
    preset("ade20k-vit-analog", Vit, 1e-4, 1.0),
    preset("pacs-supervised-analog", Vit, 1e-2, 2.0),
    preset("pacs-openclip-analog", Vit, 1e-2, 2.0),
    preset("pacs-mae-analog", Vit, 1e-2, 2.0),
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_levels_valid() {
        let mut names = names();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), PRESETS.len());
        for p in PRESETS {
            let r = p.rollback;
            assert!((0.0..=1.0).contains(&r.iota1) && r.iota2 == 0.0 && r.gamma > 0.0, "{}", p.name);
        }
    }

    #[test]
    fn named_rows() {
        let c = find("cifar100-vit-analog").unwrap();
        assert_eq!((c.rollback.iota1, c.rollback.iota2, c.rollback.gamma), (5e-3, 0.0, 2.0));
        let p = find("pacs-vit-analog").unwrap();
        assert_eq!((p.rollback.iota1, p.rollback.iota2, p.rollback.gamma), (1e-1, 0.0, 4.0));
        assert_eq!(find("officehome-cnn-analog").unwrap().method(), Method::OlorSgd);
        assert!(find("ade20k-cnn-analog").is_none());
    }
}
