"""Fixed study constants shared across the pipeline."""

METRICS = ("rmssd", "hr", "bbi")

# neutrality half-widths, percentage points
EPSILON = {"rmssd": 2.5, "hr": 1.0, "bbi": 1.0}

WINDOWS = ((0, 15), (15, 30), (30, 60), (60, 120))
OVERALL = (0, 120)
HORIZON = 120
CONTEXT_MINUTES = 90
BASELINE_MINUTES = 30
BASELINE_MIN_VALID = 24

HR_RANGE = (30.0, 220.0)
RMSSD_RANGE = (1.0, 300.0)
MAX_WINDOW_GAP = 10

CATEGORIES = (
    "Physical Activity: Cardio",
    "Physical Activity: Non-cardio",
    "Rest & Recovery",
    "Food/Drink/Nutrition",
    "Healthcare/Therapy",
    "Socializing/Social Interaction",
    "Spirituality/Mindful Activities",
    "Academic & Educational",
    "Other",
)
CATEGORY_INDEX = {name: i for i, name in enumerate(CATEGORIES)}

EXPECTED_EFFECTS = ("positive", "negative", "neutral", "unknown")


def window_label(window):
    a, b = window
    return f"{a}-{b}"


def window_index(offset):
    """Index into WINDOWS of a minute offset in [0, 120)."""
    for i, (a, b) in enumerate(WINDOWS):
        if a <= offset < b:
            return i
    raise ValueError(f"offset {offset} outside [0, {HORIZON})")
