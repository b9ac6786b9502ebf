use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 4;

/// Base (train) and novel (test) classes of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub fold: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

impl ClassSplit {
    pub fn is_train(&self, class: usize) -> bool {
        self.train_classes.contains(&class)
    }

    pub fn is_test(&self, class: usize) -> bool {
        self.test_classes.contains(&class)
    }
}

/// Fold `fold` holds out the `fold`-th contiguous quarter of the classes.
pub fn make_folds(num_classes: usize, fold: usize) -> Result<ClassSplit> {
    if fold >= NUM_FOLDS {
        return Err(Error::InvalidArgument(format!("fold id {fold} not in 0..{NUM_FOLDS}")));
    }
    if num_classes == 0 || num_classes % NUM_FOLDS != 0 {
        return Err(Error::InvalidArgument(format!(
            "{num_classes} classes cannot be split into {NUM_FOLDS} folds"
        )));
    }
    let per_fold = num_classes / NUM_FOLDS;
    let test = fold * per_fold..(fold + 1) * per_fold;
    Ok(ClassSplit {
        fold,
        train_classes: (0..num_classes).filter(|c| !test.contains(c)).collect(),
        test_classes: test.collect(),
    })
}
