mod common;

use common::oracle;

#[test]
fn nms_matches_quadratic_oracle() {
    oracle::nms_matches_quadratic_oracle();
}

#[test]
fn iou_matches_oracle() {
    oracle::iou_matches_oracle();
}

#[test]
fn codec_round_trips() {
    oracle::codec_round_trips();
}

#[test]
fn weakseg_matches_center_rule_oracle() {
    oracle::weakseg_matches_center_rule_oracle();
}

#[test]
fn proposal_mask_is_the_resized_roi_rasterised() {
    oracle::proposal_mask_is_the_resized_roi_rasterised();
}

#[test]
fn mr_curve_matches_threshold_sweep() {
    oracle::mr_curve_matches_threshold_sweep();
}

#[test]
fn mr_curve_hand_fixture() {
    oracle::mr_curve_hand_fixture();
}
