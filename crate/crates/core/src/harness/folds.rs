use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const ISAID_CLASSES: [&str; 15] = [
    "ship",
    "storage tank",
    "baseball diamond",
    "tennis court",
    "basketball court",
    "ground track field",
    "bridge",
    "large vehicle",
    "small vehicle",
    "helicopter",
    "swimming pool",
    "roundabout",
    "soccer ball field",
    "plane",
    "harbor",
];

pub const DLRSD_CLASSES: [&str; 15] = [
    "airplane",
    "bare soil",
    "buildings",
    "cars",
    "chaparral",
    "court",
    "dock",
    "field",
    "grass",
    "mobile home",
    "pavement",
    "sand",
    "sea",
    "ship",
    "tanks",
];

/// Classes in the generated toy corpus; fold `i` tests class `i + 1`.
pub const TOY_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dataset {
    Isaid5i,
    Dlrsd5i,
    Toy,
}

impl Dataset {
    /// Class names indexed from 1; `None` for the toy corpus.
    pub fn class_names(self) -> Option<&'static [&'static str; 15]> {
        match self {
            Dataset::Isaid5i => Some(&ISAID_CLASSES),
            Dataset::Dlrsd5i => Some(&DLRSD_CLASSES),
            Dataset::Toy => None,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Dataset::Toy => TOY_CLASSES,
            _ => 15,
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Isaid5i => "isaid5i",
            Dataset::Dlrsd5i => "dlrsd5i",
            Dataset::Toy => "toy",
        })
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isaid5i" | "isaid" => Ok(Dataset::Isaid5i),
            "dlrsd5i" | "dlrsd" => Ok(Dataset::Dlrsd5i),
            "toy" => Ok(Dataset::Toy),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

/// Test/train class split for one cross-validation fold. Class ids start at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub dataset: Dataset,
    pub fold: usize,
    pub test_classes: Vec<u8>,
    pub train_classes: Vec<u8>,
}

impl FoldSpec {
    pub fn new(dataset: Dataset, fold: usize) -> Result<Self> {
        if fold > 2 {
            return Err(Error::Config(format!("fold must be 0, 1 or 2, got {fold}")));
        }
        let n = dataset.num_classes() as u8;
        let test: Vec<u8> = match dataset {
            Dataset::Toy => vec![fold as u8 + 1],
            _ => (1..=5).map(|c| 5 * fold as u8 + c).collect(),
        };
        let train = (1..=n).filter(|c| !test.contains(c)).collect();
        Ok(Self {
            dataset,
            fold,
            test_classes: test,
            train_classes: train,
        })
    }

    pub fn class_name(&self, id: u8) -> String {
        match self.dataset.class_names() {
            Some(names) => names[id as usize - 1].to_string(),
            None => format!("class{id}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isaid_fold_zero_matches_table() {
        let f = FoldSpec::new(Dataset::Isaid5i, 0).unwrap();
        let names: Vec<String> = f.test_classes.iter().map(|&c| f.class_name(c)).collect();
        assert_eq!(names, ["ship", "storage tank", "baseball diamond", "tennis court", "basketball court"]);
        let f2 = FoldSpec::new(Dataset::Isaid5i, 2).unwrap();
        let names: Vec<String> = f2.test_classes.iter().map(|&c| f2.class_name(c)).collect();
        assert_eq!(names, ["swimming pool", "roundabout", "soccer ball field", "plane", "harbor"]);
    }

    #[test]
    fn dlrsd_folds_match_table() {
        let expect = [
            ["airplane", "bare soil", "buildings", "cars", "chaparral"],
            ["court", "dock", "field", "grass", "mobile home"],
            ["pavement", "sand", "sea", "ship", "tanks"],
        ];
        for (i, e) in expect.iter().enumerate() {
            let f = FoldSpec::new(Dataset::Dlrsd5i, i).unwrap();
            let names: Vec<String> = f.test_classes.iter().map(|&c| f.class_name(c)).collect();
            assert_eq!(&names, e);
        }
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        for d in [Dataset::Isaid5i, Dataset::Dlrsd5i, Dataset::Toy] {
            for i in 0..3 {
                let f = FoldSpec::new(d, i).unwrap();
                assert!(f.test_classes.iter().all(|c| !f.train_classes.contains(c)));
                assert_eq!(f.test_classes.len() + f.train_classes.len(), d.num_classes());
            }
        }
        assert_eq!(FoldSpec::new(Dataset::Isaid5i, 1).unwrap().train_classes.len(), 10);
        assert!(FoldSpec::new(Dataset::Toy, 3).is_err());
        assert_eq!("dlrsd5i".parse::<Dataset>().unwrap(), Dataset::Dlrsd5i);
    }
}
