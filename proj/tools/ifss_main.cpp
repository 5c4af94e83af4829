// Placeholder main; replaced by the full CLI once the pipeline modules exist.
int main() { return 0; }
