"""The fixed 90-entry feature layout shared by every downstream module."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Group(str, enum.Enum):
    PUPIL = "pupil"
    OCULOMOTOR = "oculomotor"
    EYELID = "eyelid"
    FNIRS = "fnirs"


PUPIL_FEATURES = (
    "pupil_mean", "pupil_std", "pupil_range", "pupil_skew", "pupil_kurtosis",
    "pupil_d1_mean", "pupil_d1_std", "pupil_d1_max",
    "pupil_d2_mean", "pupil_d2_std", "pupil_d2_max",
    "pupil_lf_power", "pupil_hf_power", "pupil_lf_hf_ratio",
    "pupil_sampen", "pupil_cv",
)

OCULOMOTOR_FEATURES = (
    "gaze_std_x", "gaze_std_y", "gaze_corr_xy", "gaze_spatial_entropy",
    "gaze_vel_mean", "gaze_vel_std", "gaze_vel_max", "gaze_vel_p90",
    "gaze_acc_mean", "gaze_acc_std", "gaze_acc_max",
    "saccade_rate", "fixation_prop",
    "gaze_slope_x", "gaze_slope_y",
    "gaze_angle_change_mean", "gaze_angle_change_std",
    "gaze_vel_sampen",
)

EYELID_FEATURES = (
    "blink_rate", "blink_dur_mean", "blink_dur_std", "ibi_mean", "ibi_std",
    "perclos_total", "perclos_weighted", "blink_dur_max",
)

FNIRS_FEATURES = (
    # global: channel-mean series and its derivative
    "fnirs_mean_mu", "fnirs_mean_sd", "fnirs_mean_skew", "fnirs_mean_range",
    "fnirs_deriv_mu", "fnirs_deriv_sd", "fnirs_deriv_skew", "fnirs_deriv_range",
    # spectral
    "fnirs_vlf_power", "fnirs_lf_power", "fnirs_hf_power", "fnirs_lf_hf_ratio", "fnirs_vlf_lf_ratio",
    # regional
    *(f"fnirs_roi{k}_{stat}" for k in range(1, 9) for stat in ("mean", "std", "sampen")),
    # symmetry
    "fnirs_lr_diff_mean", "fnirs_lr_diff_std", "fnirs_lr_diff_slope", "fnirs_lr_corr",
    "fnirs_ap_contrast", "fnirs_ap_diff_std", "fnirs_ap_diff_slope", "fnirs_ap_corr",
    # complexity
    "fnirs_global_sampen", "fnirs_hurst", "fnirs_outlier_prop",
)


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]
    groups: tuple[Group, ...]

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def group_slice(self, group: Group) -> slice:
        idx = [i for i, g in enumerate(self.groups) if g is group]
        return slice(idx[0], idx[-1] + 1)

    @property
    def eye_slice(self) -> slice:
        return slice(0, len(PUPIL_FEATURES) + len(OCULOMOTOR_FEATURES) + len(EYELID_FEATURES))

    @property
    def fnirs_slice(self) -> slice:
        return self.group_slice(Group.FNIRS)


def _build() -> FeatureSchema:
    blocks = (
        (Group.PUPIL, PUPIL_FEATURES),
        (Group.OCULOMOTOR, OCULOMOTOR_FEATURES),
        (Group.EYELID, EYELID_FEATURES),
        (Group.FNIRS, FNIRS_FEATURES),
    )
    names = tuple(n for _, block in blocks for n in block)
    groups = tuple(g for g, block in blocks for _ in block)
    assert len(set(names)) == len(names)
    return FeatureSchema(names, groups)


SCHEMA = _build()
FEATURE_NAMES = SCHEMA.names
N_FEATURES = len(SCHEMA)
N_EYE = SCHEMA.eye_slice.stop
N_FNIRS = N_FEATURES - N_EYE
