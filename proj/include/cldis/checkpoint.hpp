#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cldis/adam.hpp"
#include "cldis/kvfile.hpp"
#include "cldis/nn.hpp"

namespace cldis {

// Checkpoint directory: `manifest` plus one raw float32 file per named array.
// Parameters use their own names; optimizer moments get an `adam.` prefix.
class Checkpoint {
public:
    explicit Checkpoint(std::filesystem::path dir) : dir_(std::move(dir)) {}

    KvFile& manifest() { return manifest_; }
    const std::filesystem::path& dir() const { return dir_; }

    void add_params(const nn::ParamRefs<float>& ps) {
        for (auto* p : ps) arrays_.emplace_back(p->name, &p->w);
    }

    void add_array(const std::string& name, std::vector<float>* data) {
        arrays_.emplace_back(name, data);
    }

    void add_optimizer(nn::Adam<float>& opt) {
        const auto& ps = opt.params();
        for (size_t i = 0; i < ps.size(); ++i) {
            arrays_.emplace_back("adam." + ps[i]->name + ".m", &opt.moment1()[i]);
            arrays_.emplace_back("adam." + ps[i]->name + ".v", &opt.moment2()[i]);
        }
        opt_ = &opt;
    }

    void save() {
        std::filesystem::create_directories(dir_);
        if (opt_) manifest_.set("adam.step", opt_->step_count());
        for (auto& [name, vec] : arrays_) {
            manifest_.set("array." + name, int64_t(vec->size()));
            write_raw(dir_ / (name + ".f32"), vec->data(), vec->size());
        }
        manifest_.save(dir_ / "manifest");
    }

    // Loads every registered array; sizes must match the registered storage.
    void load() {
        manifest_ = KvFile::load(dir_ / "manifest");
        for (auto& [name, vec] : arrays_) {
            const auto count = size_t(manifest_.get_int("array." + name));
            if (count != vec->size())
                throw ConfigError(dir_.string() + ": array '" + name + "' has size " +
                                  std::to_string(count) + ", expected " + std::to_string(vec->size()));
            *vec = read_raw<float>(dir_ / (name + ".f32"), count);
        }
        if (opt_) opt_->set_step_count(manifest_.get_int("adam.step"));
    }

    static bool exists(const std::filesystem::path& dir) {
        return std::filesystem::exists(dir / "manifest");
    }

private:
    std::filesystem::path dir_;
    KvFile manifest_;
    std::vector<std::pair<std::string, std::vector<float>*>> arrays_;
    nn::Adam<float>* opt_ = nullptr;
};

}  // namespace cldis
