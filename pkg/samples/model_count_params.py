from pprint import pp

from sttpersonal.model import FreezeSpec, ModelConfig, count_params

for name in FreezeSpec.PRESETS:
    pp((name, count_params(ModelConfig(), FreezeSpec.from_name(name))))
