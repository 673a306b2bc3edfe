"""Desk-scale sequence-transducer toolkit.

Joint CTC + transducer + LM training with a two-step update, and one-pass
transducer beam search with internal-LM shallow fusion. Everything runs in
float64 on the CPU so that oracle and gradient checks hold at tight
tolerances.
"""

__version__ = "0.1.0"
