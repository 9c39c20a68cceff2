"""Multi-view consistent image diffusion at desk scale."""
