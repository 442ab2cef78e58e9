from sttpersonal.audio import AudioBuffer, log_mel

features = log_mel(AudioBuffer.from_wav("data/voice1/utt000.wav"))
print((features.num_frames, features.num_bins))
