from pprint import pp

from sttpersonal.bench import model_size_report
from sttpersonal.model import ModelConfig

pp(model_size_report(ModelConfig()))
