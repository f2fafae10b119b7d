//! Deep combinatorial weight averaging: collapse a bank into one average
//! parameterization of the base model.

use crate::bank::DcaParameterBank;
use crate::model::Granularity;

/// Result of averaging a bank. `coarse_grain_warning` is set when the bank's
/// granularity is blockwise or coarser, where averaged weights are known to
/// degrade (equivalent neuron reorderings make multilayer instances
/// incompatible under averaging).
#[derive(Debug, Clone)]
pub struct DcwaResult {
    pub params: Vec<f64>,
    pub granularity: Granularity,
    pub coarse_grain_warning: bool,
}

/// Mean of n values. Equal values short-circuit so identical instances stay
/// exact; otherwise addends are value-sorted before the left-to-right sum,
/// which makes the result independent of instance order down to the last bit.
fn mean_sorted(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    if values[0].total_cmp(&values[values.len() - 1]).is_eq() {
        return values[0];
    }
    let sum: f64 = values.iter().fold(0.0, |a, &b| a + b);
    sum / values.len() as f64
}

/// Element-wise mean over the n instances of every component, producing a
/// complete flat parameterization of the base model. The averaged model runs
/// through the same forward path as any other parameter vector; there is no
/// post-averaging fixup of any kind.
pub fn average_weights(bank: &DcaParameterBank) -> DcwaResult {
    let mut params = vec![0.0; bank.total_slots()];
    let mut scratch = vec![0.0; bank.n];
    for (c, comp) in bank.partition.components.iter().enumerate() {
        let mut cursor = 0;
        for r in &comp.ranges {
            for (k, slot) in (r.start..r.end).enumerate() {
                for i in 0..bank.n {
                    scratch[i] = bank.instances[c][i][cursor + k];
                }
                params[slot] = mean_sorted(&mut scratch);
            }
            cursor += r.len();
        }
    }
    DcwaResult {
        params,
        granularity: bank.granularity(),
        coarse_grain_warning: !bank.granularity().is_fine_grain(),
    }
}
