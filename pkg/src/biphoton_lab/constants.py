"""Measured setup constants of the two optical configurations."""

# Down-converted photon wavelength (degenerate pairs), nm.
WAVELENGTH_NM = 814.0

# EMCCD: pixel pitch (um), EM gain setting, exposure per frame (s),
# default region of interest (pixels per side) and readout cadence (frames/s).
PIXEL_PITCH_UM = 16.0
EM_GAIN = 1000.0
EXPOSURE_S = 2e-3
ROI_SIDE = 150
FRAME_RATE_HZ = 100.0

# Upper end of the photon-pair flux used in the experiments, pairs/s.
MAX_PAIR_RATE = 3e6

# Configuration 1: 50 mm lenses around the sample.
# Entanglement area and beam area (mm^2) from Gaussian fits, magnification
# from sample plane to camera.
CONFIG1_ENTANGLEMENT_AREA = 1.72e-3
CONFIG1_BEAM_AREA = 1.92
CONFIG1_MAGNIFICATION = 2.0
CONFIG1_FOCAL_LENGTH = 50.0

# Configuration 2: 0.5 NA microscope objectives around the sample.
CONFIG2_ENTANGLEMENT_AREA = 69.2e-6
CONFIG2_BEAM_AREA = 0.0432
CONFIG2_MAGNIFICATION = 10.0
# Effective focal length of a 20x objective with a 200 mm tube lens; it
# keeps the SLM-plane envelope the same as in configuration 1.
CONFIG2_FOCAL_LENGTH = 10.0

# Correlation width measured in the SLM plane and smallest grating period
# used, mm.
SLM_CORRELATION_WIDTH_MEASURED = 0.34
MIN_GRATING_PERIOD = 1.3

# Peak-ratio batching: repetitions per batch and number of batches.
FRAMES_PER_BATCH = 1000
BATCHES = 4

# Operating point of the power scan, mm.
POWER_SCAN_DELTA_X = 0.040

# Mask efficiency that lowers the large-separation peak ratio of a binary
# grating from (2/pi)^2 to about 0.25.
QUARTER_PLATEAU_SLM_EFFICIENCY = 0.618
