"""videdit: desk-scale instruction-driven video editing.

A numpy-backed reverse-mode autodiff engine, a cross-modal fusion
transformer that edits short sprite videos according to text
instructions, procedural diagnostic datasets, an adversarial training
harness, and an evaluation suite (VAD / OA / mIoU).
"""

from .tensor import Tensor, Tape, backward, no_grad, clear_tape

__all__ = ["Tensor", "Tape", "backward", "no_grad", "clear_tape"]
__version__ = "0.1.0"
