// Command-line entry point; subcommands are filled in as the modules land.
#include <cstdio>

int main() {
    std::puts("phlab: subcommands not wired up yet");
    return 0;
}
