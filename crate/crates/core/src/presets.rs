//! Named task presets carrying each benchmark's label scheme, epoch budget,
//! and split convention. The data files themselves are user-supplied in the
//! documented formats.

use crate::tasks::LabelScheme;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Ner,
    Relation,
    Classification,
}

#[derive(Debug, Clone)]
pub struct TaskPreset {
    pub name: &'static str,
    pub task: TaskKind,
    pub epochs: usize,
    /// Entity types used for training (NER only).
    pub entity_types: Vec<&'static str>,
    /// Fixed macro-average type set when it differs from the training set.
    pub macro_types: Option<Vec<&'static str>>,
    /// Relation label set (relation classification only).
    pub relation_labels: Vec<&'static str>,
    /// Class count (text classification only).
    pub num_classes: usize,
    /// Train/validation/test ratios for presets that split a single file.
    pub split_ratios: Option<[f64; 3]>,
}

const SOFC_SLOT_CORE: [&str; 16] = [
    "anode_material",
    "cathode_material",
    "conductivity",
    "current_density",
    "degradation_rate",
    "device",
    "electrolyte_material",
    "fuel_used",
    "interlayer_material",
    "open_circuit_voltage",
    "power_density",
    "resistance",
    "support_material",
    "time_of_operation",
    "voltage",
    "working_temperature",
];

/// Looks up a preset by name: `matscholar`, `sofc`, `sofc-slot`, `mspt`,
/// or `glass`.
pub fn preset(name: &str) -> Result<TaskPreset> {
    match name {
        // 7 entity types, 15 epochs.
        "matscholar" => Ok(TaskPreset {
            name: "matscholar",
            task: TaskKind::Ner,
            epochs: 15,
            entity_types: vec!["MAT", "SPL", "DSC", "PRO", "APL", "SMT", "CMT"],
            macro_types: None,
            relation_labels: vec![],
            num_classes: 0,
            split_ratios: None,
        }),
        // 4 entity types, 20 epochs.
        "sofc" => Ok(TaskPreset {
            name: "sofc",
            task: TaskKind::Ner,
            epochs: 20,
            entity_types: vec!["Material", "Experiment", "Value", "Device"],
            macro_types: None,
            relation_labels: vec![],
            num_classes: 0,
            split_ratios: None,
        }),
        // 16 fine-grained types plus two training-only extras; evaluation
        // macro-averages over 17 (the core set plus thickness).
        "sofc-slot" => {
            let mut train_types: Vec<&'static str> = SOFC_SLOT_CORE.to_vec();
            train_types.push("experiment_evoking_word");
            train_types.push("thickness");
            let mut macro_types: Vec<&'static str> = SOFC_SLOT_CORE.to_vec();
            macro_types.push("thickness");
            Ok(TaskPreset {
                name: "sofc-slot",
                task: TaskKind::Ner,
                epochs: 40,
                entity_types: train_types,
                macro_types: Some(macro_types),
                relation_labels: vec![],
                num_classes: 0,
                split_ratios: None,
            })
        }
        // 16 relation labels in three groups (operation-argument,
        // non-operation entity, operation-operation).
        "mspt" => Ok(TaskPreset {
            name: "mspt",
            task: TaskKind::Relation,
            epochs: 10,
            entity_types: vec![],
            macro_types: None,
            relation_labels: vec![
                "Recipe_target",
                "Solvent_material",
                "Atmospheric_material",
                "Recipe_precursor",
                "Participant_material",
                "Apparatus_of",
                "Condition_of",
                "Descriptor_of",
                "Number_of",
                "Amount_of",
                "Apparatus_attr_of",
                "Brand_of",
                "Core_of",
                "Property_of",
                "Type_of",
                "Next_operation",
            ],
            num_classes: 0,
            split_ratios: None,
        }),
        // Binary abstract classification, split 3:1:1 from one file.
        "glass" => Ok(TaskPreset {
            name: "glass",
            task: TaskKind::Classification,
            epochs: 5,
            entity_types: vec![],
            macro_types: None,
            relation_labels: vec![],
            num_classes: 2,
            split_ratios: Some([0.6, 0.2, 0.2]),
        }),
        other => Err(Error::Invalid(format!(
            "unknown preset `{other}` (expected matscholar|sofc|sofc-slot|mspt|glass)"
        ))),
    }
}

impl TaskPreset {
    pub fn scheme(&self) -> Result<LabelScheme> {
        LabelScheme::new(self.entity_types.iter().map(|s| s.to_string()).collect())
    }

    pub fn macro_type_names(&self) -> Option<Vec<String>> {
        self.macro_types
            .as_ref()
            .map(|ts| ts.iter().map(|s| s.to_string()).collect())
    }

    pub fn relation_label_names(&self) -> Vec<String> {
        self.relation_labels.iter().map(|s| s.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        let m = preset("matscholar").unwrap();
        assert_eq!(m.entity_types.len(), 7);
        assert_eq!(m.epochs, 15);
        assert_eq!(m.scheme().unwrap().num_tags(), 15);

        let s = preset("sofc").unwrap();
        assert_eq!(s.entity_types, vec!["Material", "Experiment", "Value", "Device"]);
        assert_eq!(s.epochs, 20);

        // 18 entity types trained, 17 evaluated.
        let slot = preset("sofc-slot").unwrap();
        assert_eq!(slot.entity_types.len(), 18);
        assert_eq!(slot.macro_types.as_ref().unwrap().len(), 17);
        assert!(slot.entity_types.contains(&"experiment_evoking_word"));
        assert!(!slot.macro_types.as_ref().unwrap().contains(&"experiment_evoking_word"));
        assert!(slot.macro_types.as_ref().unwrap().contains(&"thickness"));
        assert_eq!(slot.epochs, 40);

        // 16 relation labels.
        let mspt = preset("mspt").unwrap();
        assert_eq!(mspt.relation_labels.len(), 16);

        let glass = preset("glass").unwrap();
        assert_eq!(glass.num_classes, 2);
        assert_eq!(glass.split_ratios, Some([0.6, 0.2, 0.2]));

        assert!(preset("nope").is_err());
    }
}
