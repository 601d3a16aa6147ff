# API module for the Denoise6D benchmark service