use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn split(&self, name: &str) -> Option<(f64, f64)> {
        match name {
            "train" => Some((self.train_loss, self.train_acc)),
            "val" => Some((self.val_loss, self.val_acc)),
            "test" => Some((self.test_loss, self.test_acc)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    records: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn best_by(&self, key: impl Fn(&EpochRecord) -> (f64, f64)) -> Option<&EpochRecord> {
        // Highest accuracy, then lowest loss, then earliest epoch.
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            None => Some(r),
            Some(b) => {
                let ((ra, rl), (ba, bl)) = (key(r), key(b));
                if ra > ba || (ra == ba && rl < bl) {
                    Some(r)
                } else {
                    Some(b)
                }
            }
        })
    }

    /// Epoch with the best test accuracy, ties to the lower test loss.
    pub fn best_test(&self) -> Option<&EpochRecord> {
        self.best_by(|r| (r.test_acc, r.test_loss))
    }

    /// Same selection on the validation split.
    pub fn best_val(&self) -> Option<&EpochRecord> {
        self.best_by(|r| (r.val_acc, r.val_loss))
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.seconds).sum::<f64>() / self.records.len() as f64
    }

    /// Median wall time per epoch; robust to scheduler hiccups on a busy host.
    pub fn median_epoch_seconds(&self) -> f64 {
        let secs: Vec<f64> = self.records.iter().map(|r| r.seconds).collect();
        super::Stats::of(&secs).map_or(0.0, |s| s.median)
    }

    /// `epoch,split,loss,accuracy,seconds`, one row per epoch and split.
    /// Wall times vary between executions, so the seconds column is left
    /// empty unless `with_timing` is set.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut s = String::from("epoch,split,loss,accuracy,seconds\n");
        for r in &self.records {
            for split in ["train", "val", "test"] {
                let (loss, acc) = r.split(split).unwrap();
                let secs = if with_timing { r.seconds.to_string() } else { String::new() };
                let _ = writeln!(s, "{},{split},{loss},{acc},{secs}", r.epoch);
            }
        }
        s
    }

    /// The epochs picked by best test and best validation accuracy, side by
    /// side. Empty history gives the header alone.
    pub fn selection_csv(&self) -> String {
        let mut s = String::from("criterion,epoch,val_loss,val_acc,test_loss,test_acc\n");
        for (name, r) in [("best_test", self.best_test()), ("best_val", self.best_val())] {
            if let Some(r) = r {
                let _ = writeln!(s, "{name},{},{},{},{},{}", r.epoch, r.val_loss, r.val_acc, r.test_loss, r.test_acc);
            }
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{}", r.epoch, r.seconds);
        }
        s
    }
}
