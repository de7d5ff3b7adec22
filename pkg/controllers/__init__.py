"""Controllers package"""
from .train import train_bp
from .hessian import hessian_bp
from .landscape import landscape_bp
from .cka import cka_bp
from .modeconn import modeconn_bp
from .corrupt import corrupt_bp
from .sweep import sweep_bp
from .report import report_bp

__all__ = ['train_bp', 'hessian_bp', 'landscape_bp', 'cka_bp', 'modeconn_bp', 'corrupt_bp', 'sweep_bp', 'report_bp']
