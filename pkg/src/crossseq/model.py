"""The full student/teacher network: decomposition followed by segmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .cfd import CFD, Decomposition, LcscConfig
from .segnet import Prediction, SegNet, SegNetConfig

INPUT_COMBOS = ("t1+fa", "t1", "fa", "naive_concat")


@dataclass
class Forward:
    pred: Prediction
    dec_t1: Optional[Decomposition]
    dec_fa: Optional[Decomposition]


class CrossSeqNet(nn.Module):
    """CFD + SegNet.

    ``use_cfd=False`` feeds the raw images to the segmentation streams.
    ``input_combo`` selects which sequence drives each stream: single-sequence
    variants feed the same image to both streams; ``naive_concat`` skips the
    decomposition and the attention gate, leaving plain two-channel fusion.
    """

    def __init__(self, lcsc_t1: LcscConfig, lcsc_fa: LcscConfig, segnet: SegNetConfig,
                 use_cfd: bool = True, input_combo: str = "t1+fa"):
        super().__init__()
        if input_combo not in INPUT_COMBOS:
            raise ValueError(f"input_combo must be one of {INPUT_COMBOS}, got {input_combo!r}")
        self.input_combo = input_combo
        self.use_cfd = use_cfd and input_combo != "naive_concat"
        self.cfd = CFD(lcsc_t1, lcsc_fa) if self.use_cfd else None
        in_t1 = lcsc_t1.n_filters if self.use_cfd else 1
        in_fa = lcsc_fa.n_filters if self.use_cfd else 1
        self.segnet = SegNet(in_t1, in_fa, segnet)
        if input_combo == "naive_concat":
            self.segnet.gate_override = 1.0

    def _route(self, t1, fa):
        if self.input_combo == "t1":
            return t1, t1
        if self.input_combo == "fa":
            return fa, fa
        return t1, fa

    def forward(self, t1, fa) -> Forward:
        t1, fa = self._route(t1, fa)
        if self.cfd is None:
            return Forward(self.segnet(t1, fa), None, None)
        d1, d2 = self.cfd(t1, fa)
        return Forward(self.segnet(d1.codes, d2.codes), d1, d2)

    def probs(self, t1, fa) -> torch.Tensor:
        return self(t1, fa).pred.probs

    @torch.no_grad()
    def clamp_(self):
        if self.cfd is not None:
            self.cfd.clamp_()
