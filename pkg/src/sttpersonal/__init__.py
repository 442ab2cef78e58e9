"""端末上での音声認識モデルの個人化。"""

__version__ = "0.1.0"
