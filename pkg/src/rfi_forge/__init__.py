"""rfi-forge: simulation-driven SAR radio-frequency-interference suppression.

Submodules:
  signal_model  -- SAR echoes and RFI waveform families
  timefreq      -- STFT/ISTFT, TF images, oracle masks, masked subtraction
  autograd      -- minimal reverse-mode tensor library
  difnet        -- windowed-attention U-net mask predictor and training
  suppression   -- detection, notch baseline, full pipeline, imaging
  metrics       -- PA / IoU / PSNR / entropy-mean metrics
  datasets      -- simulated labeled datasets and pipeline scenarios
  io_formats    -- binary dataset/checkpoint/echo/image/PGM formats
  config, cli   -- run configuration and command-line entry points
"""

__version__ = "0.1.0"
