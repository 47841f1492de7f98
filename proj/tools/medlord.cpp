#include <cstdio>

int main() {
    std::printf("medlord CLI placeholder\n");
    return 0;
}
