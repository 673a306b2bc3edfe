import numpy as np
import pytest

from seqtrans import networks as nets


def tiny_model_config(d_lm=3, feat_dim=6, d_model=8, n_layers=1, n_heads=2,
                      ffn=16, embed=5, lstm_cell=7, lstm_layers=1, joint_dim=9,
                      dropout=0.0):
    return nets.ModelConfig(
        transcription=nets.TranscriptionConfig(
            feat_dim=feat_dim, cnn_head_out=d_model, n_layers=n_layers,
            d_model=d_model, n_heads=n_heads, ffn_conv1_out=ffn,
            ffn_conv2_out=d_model, dropout=dropout,
        ),
        prediction=nets.PredictionConfig(
            embed_dim=embed, lstm_layers=lstm_layers, lstm_cell=lstm_cell, dropout=dropout,
        ),
        joint=nets.JointConfig(joint_dim=joint_dim),
        d_lm=d_lm,
    )


def tiny_model(seed=0, **kwargs):
    cfg = tiny_model_config(**kwargs)
    return nets.Model(cfg, nets.init_params(cfg, seed))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
