//! Extract contour ground truth from a mask and evaluate the dual loss.
//!
//! The contour label marks every foreground pixel within a city-block
//! distance `width` of the background. The training objective is the
//! unweighted sum of cross-entropy on the segmentation head and Dice on the
//! contour head's foreground channel.

use mafa_seg::contour::{self, DICE_TAU};
use mafa_seg::geometry::BinaryMask;

fn render(mask: &BinaryMask) -> String {
    (0..mask.height)
        .map(|r| {
            (0..mask.width)
                .map(|c| if mask.get(r, c) { '#' } else { '.' })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() -> mafa_seg::Result<()> {
    // A 12x12 blob.
    let mut mask = BinaryMask::zeros(12, 12);
    for r in 2..10 {
        for c in 3..11 {
            mask.set(r, c, true);
        }
    }
    println!("mask:\n{}\n", render(&mask));

    let gt = contour::extract_contour_gt(&mask, 2)?;
    let mut contour_mask = BinaryMask::zeros(12, 12);
    for r in 0..12 {
        for c in 0..12 {
            contour_mask.set(r, c, gt.at(0, r, c, 1) > 0.5);
        }
    }
    println!("contour band (width 2):\n{}\n", render(&contour_mask));

    // A perfect prediction scores near-zero on both loss terms; the
    // all-background prediction is heavily penalized.
    let onehot = contour::mask_to_onehot(&mask);
    let (l_s_perfect, _) = contour::cross_entropy_seg_loss(&onehot, &onehot)?;
    let (l_c_perfect, _) = contour::dice_contour_loss(&gt, &gt, DICE_TAU)?;

    let mut blank = onehot.clone();
    for i in 0..blank.data.len() / 2 {
        blank.data[2 * i] = 0.999;
        blank.data[2 * i + 1] = 0.001;
    }
    let (l_s_blank, _) = contour::cross_entropy_seg_loss(&blank, &onehot)?;
    let (l_c_blank, _) = contour::dice_contour_loss(&blank, &gt, DICE_TAU)?;

    println!("perfect prediction: L_S {l_s_perfect:.4}  L_C {l_c_perfect:.4}  total {:.4}",
        contour::total_loss(l_s_perfect, l_c_perfect)?);
    println!("blank prediction:   L_S {l_s_blank:.4}  L_C {l_c_blank:.4}  total {:.4}",
        contour::total_loss(l_s_blank, l_c_blank)?);
    Ok(())
}
