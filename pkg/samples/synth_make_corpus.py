from sttpersonal.synth import SynthConfig, generate_corpus

entries = generate_corpus(SynthConfig(voices=7, utterances_per_voice=70), "data")
print((len(entries), entries[0].id, entries[0].text))
