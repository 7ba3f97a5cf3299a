"""Lung-ultrasound COVID-19 screening pipeline."""
