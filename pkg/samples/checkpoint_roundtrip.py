from sttpersonal.checkpoint import load_checkpoint, save_checkpoint
from sttpersonal.model import ModelConfig, init_model

config = ModelConfig()
params = init_model(config, 0)
save_checkpoint(params, "init.epck")
loaded = load_checkpoint("init.epck", config)
print(max(float(abs(loaded[name] - params[name]).max()) for name in params))
