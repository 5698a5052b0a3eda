"""Black box tests package."""
