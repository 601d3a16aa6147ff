# Denoise6D benchmark toolkit app package
