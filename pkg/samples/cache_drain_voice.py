from sttpersonal.cache import UtteranceCache
from sttpersonal.dataset import by_voice, read_manifest

cache = UtteranceCache("cache")
for entry in by_voice(read_manifest("data/manifest.jsonl"))["voice7"]:
    cache.add_utterance(entry.audio, entry.text)
session = cache.drain()
print((len(session.train), len(session.validation), session.token))
