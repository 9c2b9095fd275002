#include "diffdti/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "diffdti/checkpoint.hpp"
#include "diffdti/metrics.hpp"
#include "diffdti/nifti.hpp"
#include "diffdti/phantom.hpp"
#include "diffdti/pipeline.hpp"
#include "diffdti/trainer.hpp"

namespace fs = std::filesystem;

namespace diffdti {

namespace {

std::string subject_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "sub-%03d", index + 1);
    return buf;
}

SdeSchedule schedule_from(const RunConfig& cfg) {
    SdeSchedule s;
    s.sigma_min = cfg.get_double("sigma_min");
    s.sigma_max = cfg.get_double("sigma_max");
    s.num_steps = static_cast<int>(cfg.get_int("num_steps"));
    s.validate();
    return s;
}

SamplerConfig sampler_from(const RunConfig& cfg) {
    SamplerConfig s;
    s.schedule = schedule_from(cfg);
    s.snr = cfg.get_double("snr");
    s.corrector_steps = static_cast<int>(cfg.get_int("corrector_steps"));
    s.rng_seed = static_cast<uint64_t>(cfg.get_int("seed"));
    s.validate();
    return s;
}

nn::NetworkConfig network_from(const RunConfig& cfg, MapType map, int n_directions) {
    nn::NetworkConfig n;
    n.depth = static_cast<int>(cfg.get_int("unet_depth"));
    n.base_channels = static_cast<int>(cfg.get_int("base_channels"));
    for (double m : cfg.get_list("channel_mult")) n.channel_mult.push_back(static_cast<int>(m));
    n.res_blocks = static_cast<int>(cfg.get_int("res_blocks"));
    n.x_channels = map_channels(map);
    n.cond_channels = n_directions + 1;
    n.height = n.width = static_cast<int>(cfg.get_int("pad_size"));
    n.gn_groups = static_cast<int>(cfg.get_int("gn_groups"));
    n.time_embed_dim = static_cast<int>(cfg.get_int("time_embed_dim"));
    n.fen_patch_size = static_cast<int>(cfg.get_int("fen_patch_size"));
    n.fen_layers = static_cast<int>(cfg.get_int("fen_layers"));
    n.fen_heads = static_cast<int>(cfg.get_int("fen_heads"));
    n.fen_embed_dim = static_cast<int>(cfg.get_int("fen_embed_dim"));
    n.fen_ffn_dim = static_cast<int>(cfg.get_int("fen_ffn_dim"));
    n.dfb_max_kv_tokens = static_cast<int>(cfg.get_int("dfb_max_kv_tokens"));
    n.sigma_min = cfg.get_double("sigma_min");
    n.sigma_max = cfg.get_double("sigma_max");
    n.validate();
    return n;
}

TrainConfig train_from(const RunConfig& cfg) {
    TrainConfig t;
    t.learning_rate = cfg.get_double("learning_rate");
    t.grad_clip_max_norm = cfg.get_double("grad_clip_max_norm");
    t.ema_decay = cfg.get_double("ema_decay");
    t.batch_size = static_cast<int>(cfg.get_int("batch_size"));
    t.max_steps = static_cast<int>(cfg.get_int("max_steps"));
    t.seed = static_cast<uint64_t>(cfg.get_int("seed"));
    t.target_map = map_type_from_name(cfg.get_string("target_map"));
    t.n_directions = static_cast<int>(cfg.get_int("n_directions"));
    t.checkpoint_every = static_cast<int>(cfg.get_int("checkpoint_every"));
    t.log_every = static_cast<int>(cfg.get_int("log_every"));
    t.validate();
    return t;
}

std::string manifest_path(const RunConfig& cfg) {
    std::string m = cfg.get_string("manifest");
    if (m.empty()) m = cfg.get_string("out_dir") + "/manifest.txt";
    return m;
}

std::string checkpoint_path(const RunConfig& cfg) {
    std::string c = cfg.get_string("checkpoint");
    if (c.empty()) c = cfg.get_string("out_dir") + "/checkpoints/ckpt_final.ddt";
    return c;
}

Volume mask_to_volume(const std::vector<uint8_t>& mask, int nx, int ny, int nz) {
    Volume v(nx, ny, nz, 1);
    for (size_t i = 0; i < mask.size(); ++i) v.data[i] = mask[i] ? 1.f : 0.f;
    return v;
}

std::vector<uint8_t> volume_to_mask(const Volume& v) {
    std::vector<uint8_t> mask(v.nvox());
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = v.data[i] > 0.5f ? 1 : 0;
    return mask;
}

const DtiMap& map_of(const ReferenceMaps& refs, MapType t) {
    switch (t) {
        case MapType::FA: return refs.fa;
        case MapType::MD: return refs.md;
        case MapType::ColorFA: return refs.color_fa;
    }
    fail(ErrorKind::Config, "unknown map type");
}

// Conditioning stack and target-map slices for one subject, normalized and
// padded the same way for training and sampling.
struct SubjectTensors {
    std::vector<nn::Tensor> y_slices;
    std::vector<nn::Tensor> x0_slices; // empty when no reference map requested
    PaddedStack stack_info;
    std::vector<int> slice_ids;
    Volume ref_map;                    // original-grid reference (if loaded)
    std::vector<uint8_t> ref_mask;     // original-grid eroded mask (if loaded)
};

SubjectTensors prepare_subject(const ManifestEntry& entry, const RunConfig& cfg,
                               const std::vector<int>& direction_indices, MapType map,
                               bool with_reference) {
    LoadOptions lo;
    lo.b_shell = cfg.get_double("b_shell");
    lo.b_tolerance = cfg.get_double("b_tolerance");
    DwiStudy study = load_study(entry, lo);

    for (int idx : direction_indices)
        if (idx < 0 || idx >= static_cast<int>(study.table.size()) || study.table.is_b0(idx))
            fail(ErrorKind::Data, "study " + entry.id + ": direction index " +
                                      std::to_string(idx) + " is not a DWI volume");

    std::vector<int> b0_all;
    for (size_t i = 0; i < study.table.size(); ++i)
        if (study.table.is_b0(i)) b0_all.push_back(static_cast<int>(i));
    if (b0_all.empty()) fail(ErrorKind::Data, "study " + entry.id + ": no b0 volume");

    NormalizeOptions no;
    no.percentile = cfg.get_double("normalize_percentile");
    no.clip = cfg.get_double("normalize_clip");
    no.target = static_cast<int>(cfg.get_int("pad_size"));

    SubjectTensors out;
    PaddedStack padded = normalize_and_pad(study.volumes, b0_all, no);
    out.stack_info = padded;

    const int count =
        std::min<int>(static_cast<int>(cfg.get_int("slices_per_subject")), study.volumes.nz);
    out.slice_ids = select_slices(study.volumes.nz, count);

    std::vector<int> frames;
    frames.push_back(b0_all.front());
    for (int idx : direction_indices) frames.push_back(idx);

    Volume padded_map;
    if (with_reference) {
        const fs::path dir = fs::path(entry.dwi_path).parent_path();
        const std::string ref_path =
            (dir / ("ref_" + std::string(map_type_name(map)) + ".nii")).string();
        const std::string mask_path = (dir / "ref_mask.nii").string();
        if (!fs::exists(ref_path))
            fail(ErrorKind::Data, "missing reference map " + ref_path + " (run fit first)");
        out.ref_map = nifti_read(ref_path);
        out.ref_mask = volume_to_mask(nifti_read(mask_path));
        padded_map = pad_only(out.ref_map, no.target).volumes;
    }

    for (int z : out.slice_ids) {
        out.y_slices.push_back(slice_to_tensor(padded.volumes, frames, z));
        if (with_reference) out.x0_slices.push_back(map_slice_to_tensor(padded_map, z));
    }
    return out;
}

std::vector<ManifestEntry> entries_for_split(const RunConfig& cfg, const std::string& split) {
    auto all = manifest_load(manifest_path(cfg));
    std::vector<ManifestEntry> out;
    for (auto& e : all)
        if (e.split == split) out.push_back(std::move(e));
    if (out.empty())
        fail(ErrorKind::Data, "manifest has no '" + split + "' entries: " + manifest_path(cfg));
    return out;
}

std::vector<int> parse_indices(const std::string& csv) {
    std::vector<int> out;
    std::string item;
    std::istringstream ss(csv);
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

std::string join_indices(const std::vector<int>& idx) {
    std::string out;
    for (size_t i = 0; i < idx.size(); ++i) out += (i ? "," : "") + std::to_string(idx[i]);
    return out;
}

// Merge: checkpoint echo first, explicit current keys override.
RunConfig merged_with_checkpoint(const RunConfig& cfg, const Archive& archive) {
    RunConfig merged;
    for (const auto& [name, value] : archive.strings)
        if (name.rfind("config/", 0) == 0) merged.set(name.substr(7), value);
    for (const auto& [key, value] : cfg.explicitly_set()) merged.set(key, value);
    return merged;
}

struct LoadedModel {
    std::unique_ptr<nn::FefmNetwork> net;
    RunConfig cfg; // merged
    MapType map = MapType::FA;
    std::vector<int> direction_indices;
};

LoadedModel load_model(const RunConfig& cfg, bool use_ema) {
    const std::string path = checkpoint_path(cfg);
    if (!fs::exists(path))
        fail(ErrorKind::Data, "checkpoint not found: " + path + " (run train first)");
    Archive archive = Archive::load(path);

    LoadedModel m;
    m.cfg = merged_with_checkpoint(cfg, archive);
    m.map = map_type_from_name(archive.str("train/target_map"));
    m.direction_indices = parse_indices(archive.str("train/direction_indices"));

    // Network geometry must match the stored parameters, so it comes from the
    // checkpoint echo rather than the live config.
    RunConfig net_cfg;
    for (const auto& [name, value] : archive.strings)
        if (name.rfind("config/", 0) == 0) net_cfg.set(name.substr(7), value);
    m.net = std::make_unique<nn::FefmNetwork>(
        network_from(net_cfg, m.map, static_cast<int>(m.direction_indices.size())), 0);
    for (auto& p : m.net->params()) {
        const std::string key = (use_ema ? "ema/" : "param/") + p.name;
        p.value->require_shape(archive.tensor(key), "checkpoint load");
        *p.value = archive.tensor(key);
    }
    return m;
}

// Score adapter: converts the sampler's noise level to the network's own time
// parameterization, so sampling stays coherent when the sampler schedule
// differs from the trained one (e.g. sigma_max sweeps).
ScoreFn make_score_fn(nn::FefmNetwork& net, const SdeSchedule& sampler_schedule) {
    const double net_min = net.config().sigma_min;
    const double net_max = net.config().sigma_max;
    return [&net, sampler_schedule, net_min, net_max](const nn::Tensor& x, const nn::Tensor& y,
                                                      const std::vector<double>& t) {
        std::vector<double> t_net(t.size());
        for (size_t i = 0; i < t.size(); ++i) {
            const double sigma = sampler_schedule.sigma_min *
                                 std::pow(sampler_schedule.sigma_max / sampler_schedule.sigma_min,
                                          t[i]);
            const double u = std::log(sigma / net_min) / std::log(net_max / net_min);
            t_net[i] = std::clamp(u, 0.0, 1.0);
        }
        return net.forward(x, y, t_net);
    };
}

Volume tensor_batch_to_volume(const std::vector<nn::Tensor>& slices, const PaddedStack& info) {
    const int channels = slices.front().c;
    Volume padded(info.volumes.nx, info.volumes.ny, static_cast<int>(slices.size()), channels);
    const size_t plane = static_cast<size_t>(info.volumes.nx) * info.volumes.ny;
    for (size_t z = 0; z < slices.size(); ++z)
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < info.volumes.ny; ++y)
                for (int x = 0; x < info.volumes.nx; ++x)
                    padded.data[(static_cast<size_t>(c) * slices.size() + z) * plane +
                                static_cast<size_t>(y) * info.volumes.nx + x] =
                        slices[z].v[(static_cast<size_t>(c) * info.volumes.ny + y) *
                                        info.volumes.nx +
                                    x];
    PaddedStack fake = info;
    return unpad(padded, fake);
}

} // namespace

void cmd_phantom(const RunConfig& cfg) {
    const std::string out_dir = cfg.get_string("out_dir");
    fs::create_directories(out_dir);

    const int n_subjects = static_cast<int>(cfg.get_int("phantom_subjects"));
    const int n_test = static_cast<int>(cfg.get_int("phantom_test_subjects"));
    if (n_subjects < 1) fail(ErrorKind::Config, "phantom: phantom_subjects must be >= 1");
    if (n_test < 0 || n_test >= n_subjects)
        fail(ErrorKind::Config, "phantom: phantom_test_subjects must be in [0, subjects)");
    const int size = static_cast<int>(cfg.get_int("phantom_size"));
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed"));

    GradientTable table =
        make_directions(static_cast<int>(cfg.get_int("phantom_directions")),
                        static_cast<int>(cfg.get_int("phantom_b0_count")),
                        cfg.get_double("b_shell"), seed);

    std::vector<ManifestEntry> entries;
    for (int s = 0; s < n_subjects; ++s) {
        Rng rng = Rng(seed).fork(static_cast<uint64_t>(s) + 1);
        PhantomSpec spec;
        spec.size = size;
        spec.nslices = static_cast<int>(cfg.get_int("phantom_slices"));
        const int rmin = static_cast<int>(cfg.get_int("phantom_regions_min"));
        const int rmax = static_cast<int>(cfg.get_int("phantom_regions_max"));
        if (rmin < 0 || rmax < rmin)
            fail(ErrorKind::Config, "phantom: bad region count range");
        const int count = rmin + static_cast<int>(rng.uniform_index(
                                     static_cast<uint64_t>(rmax - rmin + 1)));
        spec.regions = random_regions(size, count, rng);
        spec.rician_snr = cfg.get_double("phantom_snr");
        spec.table = table;
        spec.seed = seed + static_cast<uint64_t>(s) * 7919;

        PhantomData data = generate_phantom(spec);

        const std::string id = subject_name(s);
        const fs::path dir = fs::path(out_dir) / id;
        fs::create_directories(dir);
        nifti_write((dir / "dwi.nii").string(), data.study.volumes);
        gradient_table_save(data.study.table, (dir / "bvals.txt").string(),
                            (dir / "bvecs.txt").string());
        nifti_write((dir / "truth_fa.nii").string(), data.analytic_fa);
        nifti_write((dir / "truth_md.nii").string(), data.analytic_md);
        nifti_write((dir / "truth_cfa.nii").string(), data.analytic_cfa);
        nifti_write((dir / "truth_mask.nii").string(),
                    mask_to_volume(data.mask, size, size, spec.nslices));

        ManifestEntry e;
        e.id = id;
        e.dwi_path = (dir / "dwi.nii").string();
        e.bval_path = (dir / "bvals.txt").string();
        e.bvec_path = (dir / "bvecs.txt").string();
        e.split = s < n_subjects - n_test ? "train" : "test";
        entries.push_back(e);
        std::cout << "phantom: wrote " << id << " (" << e.split << ")\n";
    }
    manifest_save(entries, out_dir + "/manifest.txt");
    std::cout << "phantom: manifest with " << entries.size() << " subjects at " << out_dir
              << "/manifest.txt\n";
}

void cmd_fit(const RunConfig& cfg) {
    auto entries = manifest_load(manifest_path(cfg));
    LoadOptions lo;
    lo.b_shell = cfg.get_double("b_shell");
    lo.b_tolerance = cfg.get_double("b_tolerance");
    ReferenceOptions ro;
    ro.erode_radius = static_cast<int>(cfg.get_int("erode_radius"));

    for (const auto& entry : entries) {
        DwiStudy study = load_study(entry, lo);
        ReferenceMaps refs = build_reference(study, ro);
        const fs::path dir = fs::path(entry.dwi_path).parent_path();
        nifti_write((dir / "ref_fa.nii").string(), refs.fa.values);
        nifti_write((dir / "ref_md.nii").string(), refs.md.values);
        nifti_write((dir / "ref_cfa.nii").string(), refs.color_fa.values);
        Volume mask_vol =
            mask_to_volume(refs.mask, study.volumes.nx, study.volumes.ny, study.volumes.nz);
        mask_vol.pixdim = study.volumes.pixdim;
        nifti_write((dir / "ref_mask.nii").string(), mask_vol);
        std::cout << "fit: " << entry.id << " done (clamped eigenvalue fraction "
                  << refs.clamp_fraction << ")\n";
    }
}

void cmd_train(const RunConfig& cfg) {
    const std::string out_dir = cfg.get_string("out_dir");
    fs::create_directories(out_dir + "/checkpoints");

    TrainConfig tcfg = train_from(cfg);
    auto entries = entries_for_split(cfg, "train");

    // One direction subset per run, shared by every subject.
    LoadOptions lo;
    lo.b_shell = cfg.get_double("b_shell");
    lo.b_tolerance = cfg.get_double("b_tolerance");
    DwiStudy first = load_study(entries.front(), lo);
    const DirectionPicker picker = cfg.get_string("direction_picker") == "mincond"
                                       ? DirectionPicker::MinCondition
                                       : DirectionPicker::Random;
    const std::vector<int> directions =
        pick_directions(first.table, tcfg.n_directions, picker, tcfg.seed);
    std::cout << "train: conditioning on b0 + DWI indices [" << join_indices(directions) << "]\n";

    Dataset dataset;
    for (const auto& entry : entries) {
        SubjectTensors st = prepare_subject(entry, cfg, directions, tcfg.target_map, true);
        for (size_t i = 0; i < st.y_slices.size(); ++i)
            dataset.push_back({st.x0_slices[i], st.y_slices[i]});
        std::cout << "train: loaded " << entry.id << " (" << st.y_slices.size() << " slices)\n";
    }
    std::cout << "train: dataset has " << dataset.size() << " slice pairs\n";

    nn::NetworkConfig ncfg = network_from(cfg, tcfg.target_map, tcfg.n_directions);
    nn::FefmNetwork net(ncfg, tcfg.seed);
    std::cout << "train: network has " << net.parameter_count() << " parameters\n";

    Trainer trainer(net, tcfg, schedule_from(cfg));
    if (!cfg.get_string("checkpoint").empty()) {
        trainer.restore(Archive::load(cfg.get_string("checkpoint")));
        std::cout << "train: resumed from step " << trainer.current_step() << "\n";
    }

    TrainStats stats = trainer.train(dataset, out_dir + "/checkpoints", out_dir + "/train_log.csv");

    Archive final = trainer.make_checkpoint(cfg.effective());
    final.strings["train/target_map"] = map_type_name(tcfg.target_map);
    final.strings["train/direction_indices"] = join_indices(directions);
    final.save(out_dir + "/checkpoints/ckpt_final.ddt");
    std::cout << "train: " << stats.steps << " steps, loss " << stats.first_loss << " -> "
              << stats.final_loss << "\n";
}

void cmd_sample(const RunConfig& cfg) {
    LoadedModel model = load_model(cfg, /*use_ema=*/true);
    const RunConfig& mcfg = model.cfg;
    const std::string out_dir = cfg.get_string("out_dir");
    fs::create_directories(out_dir + "/samples");

    SamplerConfig scfg = sampler_from(mcfg);
    ScoreFn score = make_score_fn(*model.net, scfg.schedule);
    const int sample_batch = std::max<int>(1, static_cast<int>(mcfg.get_int("sample_batch")));

    std::ofstream timing(out_dir + "/samples/timing.csv");
    timing << "id,map_type,slices,num_steps,wall_seconds\n";

    auto entries = entries_for_split(mcfg, "test");
    for (size_t e = 0; e < entries.size(); ++e) {
        SubjectTensors st =
            prepare_subject(entries[e], mcfg, model.direction_indices, model.map, false);
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<nn::Tensor> generated(st.y_slices.size());

        for (size_t start = 0; start < st.y_slices.size(); start += sample_batch) {
            const size_t stop = std::min(st.y_slices.size(), start + sample_batch);
            const int B = static_cast<int>(stop - start);
            nn::Tensor y(B, st.y_slices.front().c, st.y_slices.front().h,
                         st.y_slices.front().w);
            for (int b = 0; b < B; ++b)
                std::copy(st.y_slices[start + b].v.begin(), st.y_slices[start + b].v.end(),
                          y.sample(b));
            SamplerConfig batch_cfg = scfg;
            batch_cfg.rng_seed =
                Rng(scfg.rng_seed).fork(e * 1000 + start).next_u64();
            nn::Tensor x = pc_sample(score, y, map_channels(model.map), batch_cfg);
            for (int b = 0; b < B; ++b) {
                nn::Tensor slice(1, x.c, x.h, x.w);
                std::copy(x.sample(b), x.sample(b) + slice.size(), slice.v.begin());
                generated[start + b] = std::move(slice);
            }
        }
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        Volume vol = tensor_batch_to_volume(generated, st.stack_info);
        const std::string path = out_dir + "/samples/" + entries[e].id + "_gen_" +
                                 map_type_name(model.map) + ".nii";
        nifti_write(path, vol);
        timing << entries[e].id << "," << map_type_name(model.map) << "," << generated.size()
               << "," << scfg.schedule.num_steps << "," << wall << "\n";
        std::cout << "sample: " << entries[e].id << " -> " << path << " (" << wall << " s)\n";
    }
}

void cmd_eval(const RunConfig& cfg) {
    const std::string out_dir = cfg.get_string("out_dir");
    fs::create_directories(out_dir + "/eval");

    MetricConfig mcfg;
    mcfg.ssim_window = static_cast<int>(cfg.get_int("ssim_window"));
    mcfg.masked = cfg.get_bool("eval_masked");

    auto entries = entries_for_split(cfg, "test");
    std::vector<EvalPair> pairs;
    std::vector<std::string> missing;
    for (const auto& entry : entries) {
        const fs::path dir = fs::path(entry.dwi_path).parent_path();
        for (const char* map_name : {"fa", "md", "cfa"}) {
            const std::string gen_path =
                out_dir + "/samples/" + entry.id + "_gen_" + map_name + ".nii";
            if (!fs::exists(gen_path)) continue;
            const std::string ref_path = (dir / ("ref_" + std::string(map_name) + ".nii")).string();
            const std::string mask_path = (dir / "ref_mask.nii").string();
            if (!fs::exists(ref_path) || !fs::exists(mask_path)) {
                missing.push_back(entry.id + ":" + map_name);
                continue;
            }
            EvalPair p;
            p.id = entry.id;
            p.map_type = map_name;
            p.generated = nifti_read(gen_path);
            p.reference = nifti_read(ref_path);
            p.mask = volume_to_mask(nifti_read(mask_path));
            pairs.push_back(std::move(p));
        }
    }
    if (!missing.empty()) {
        std::string ids;
        for (const auto& m : missing) ids += " " + m;
        fail(ErrorKind::Evaluation, "eval: unpaired items (missing references):" + ids);
    }
    if (pairs.empty())
        fail(ErrorKind::Evaluation, "eval: no generated/reference pairs under " + out_dir);

    EvalReport report = evaluate_run(pairs, mcfg);
    std::ofstream csv(out_dir + "/eval/report.csv");
    csv << report.to_csv();
    std::ofstream txt(out_dir + "/eval/report.txt");
    txt << report.to_table();
    std::cout << report.to_table();
}

void cmd_ablate(const RunConfig& cfg) {
    LoadedModel model = load_model(cfg, /*use_ema=*/true);
    const RunConfig& mcfg = model.cfg;
    const std::string out_dir = cfg.get_string("out_dir");
    fs::create_directories(out_dir + "/ablate");

    // Conditioning and references for the first few test slices.
    auto entries = entries_for_split(mcfg, "test");
    const int max_images = std::max<int>(1, static_cast<int>(mcfg.get_int("ablate_max_images")));

    std::vector<nn::Tensor> y_slices;
    std::vector<Volume> ref_slices;
    std::vector<std::vector<uint8_t>> mask_slices;
    for (const auto& entry : entries) {
        if (static_cast<int>(y_slices.size()) >= max_images) break;
        SubjectTensors st = prepare_subject(entry, mcfg, model.direction_indices, model.map, true);
        for (size_t i = 0; i < st.y_slices.size() && static_cast<int>(y_slices.size()) < max_images;
             ++i) {
            y_slices.push_back(st.y_slices[i]);
            const int z = st.slice_ids[i];
            Volume ref(st.ref_map.nx, st.ref_map.ny, 1, st.ref_map.nt);
            std::vector<uint8_t> mask(ref.nvox());
            const size_t plane = st.ref_map.nvox() / st.ref_map.nz;
            for (int c = 0; c < st.ref_map.nt; ++c)
                std::copy(st.ref_map.data.begin() + (c * st.ref_map.nz + z) * plane,
                          st.ref_map.data.begin() + (c * st.ref_map.nz + z + 1) * plane,
                          ref.data.begin() + static_cast<size_t>(c) * plane);
            std::copy(st.ref_mask.begin() + z * plane, st.ref_mask.begin() + (z + 1) * plane,
                      mask.begin());
            ref_slices.push_back(std::move(ref));
            mask_slices.push_back(std::move(mask));
        }
    }

    MetricConfig metric_cfg;
    metric_cfg.ssim_window = static_cast<int>(mcfg.get_int("ssim_window"));
    metric_cfg.masked = mcfg.get_bool("eval_masked");

    const int B = static_cast<int>(y_slices.size());
    nn::Tensor y(B, y_slices.front().c, y_slices.front().h, y_slices.front().w);
    for (int b = 0; b < B; ++b)
        std::copy(y_slices[b].v.begin(), y_slices[b].v.end(), y.sample(b));

    struct GridResult {
        double value;
        double psnr_mean, psnr_std, ssim_mean, ssim_std, wall;
    };

    auto run_point = [&](const SamplerConfig& scfg) {
        ScoreFn score = make_score_fn(*model.net, scfg.schedule);
        const auto t0 = std::chrono::steady_clock::now();
        nn::Tensor x = pc_sample(score, y, map_channels(model.map), scfg);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        std::vector<double> psnrs, ssims;
        for (int b = 0; b < B; ++b) {
            // generated slice back to the reference grid
            nn::Tensor slice(1, x.c, x.h, x.w);
            std::copy(x.sample(b), x.sample(b) + slice.size(), slice.v.begin());
            Volume gen(ref_slices[b].nx, ref_slices[b].ny, 1, ref_slices[b].nt);
            const int off_x = (x.w - ref_slices[b].nx) / 2;
            const int off_y = (x.h - ref_slices[b].ny) / 2;
            for (int c = 0; c < gen.nt; ++c)
                for (int yy = 0; yy < gen.ny; ++yy)
                    for (int xx = 0; xx < gen.nx; ++xx)
                        gen.at(xx, yy, 0, c) =
                            slice.v[(static_cast<size_t>(c) * x.h + yy + off_y) * x.w + xx +
                                    off_x];
            psnrs.push_back(psnr(ref_slices[b], gen, mask_slices[b]));
            ssims.push_back(ssim(ref_slices[b], gen, metric_cfg, mask_slices[b]));
        }
        auto mean_std = [](const std::vector<double>& v) {
            double mean = 0;
            for (double x_ : v) mean += x_;
            mean /= static_cast<double>(v.size());
            double var = 0;
            for (double x_ : v) var += (x_ - mean) * (x_ - mean);
            return std::pair<double, double>(mean, std::sqrt(var / static_cast<double>(v.size())));
        };
        auto [pm, ps] = mean_std(psnrs);
        auto [sm, ss] = mean_std(ssims);
        return GridResult{0.0, pm, ps, sm, ss, wall};
    };

    auto write_csv = [&](const std::string& name, const std::string& param,
                         const std::vector<GridResult>& results) {
        std::ofstream csv(out_dir + "/ablate/" + name);
        csv << "param,value,metric,mean,std,n,wall_seconds\n";
        for (const auto& r : results) {
            csv << param << "," << r.value << ",psnr," << r.psnr_mean << "," << r.psnr_std << ","
                << B << "," << r.wall << "\n";
            csv << param << "," << r.value << ",ssim," << r.ssim_mean << "," << r.ssim_std << ","
                << B << "," << r.wall << "\n";
        }
    };

    SamplerConfig base = sampler_from(mcfg);

    std::vector<GridResult> n_results;
    for (double n : mcfg.get_list("ablate_n_grid")) {
        SamplerConfig scfg = base;
        scfg.schedule.num_steps = static_cast<int>(n);
        GridResult r = run_point(scfg);
        r.value = n;
        n_results.push_back(r);
        std::cout << "ablate: N=" << n << " psnr " << r.psnr_mean << " ssim " << r.ssim_mean
                  << " wall " << r.wall << " s\n";
    }
    write_csv("n_steps.csv", "num_steps", n_results);

    std::vector<GridResult> snr_results;
    for (double snr : mcfg.get_list("ablate_snr_grid")) {
        SamplerConfig scfg = base;
        scfg.snr = snr;
        GridResult r = run_point(scfg);
        r.value = snr;
        snr_results.push_back(r);
        std::cout << "ablate: snr=" << snr << " psnr " << r.psnr_mean << " ssim " << r.ssim_mean
                  << "\n";
    }
    write_csv("snr.csv", "snr", snr_results);

    std::vector<GridResult> sig_results;
    for (double sig : mcfg.get_list("ablate_sigma_max_grid")) {
        SamplerConfig scfg = base;
        scfg.schedule.sigma_max = sig;
        GridResult r = run_point(scfg);
        r.value = sig;
        sig_results.push_back(r);
        std::cout << "ablate: sigma_max=" << sig << " psnr " << r.psnr_mean << " ssim "
                  << r.ssim_mean << "\n";
    }
    write_csv("sigma_max.csv", "sigma_max", sig_results);
}

void run_command(const std::string& name, const RunConfig& cfg) {
    if (name == "phantom") return cmd_phantom(cfg);
    if (name == "fit") return cmd_fit(cfg);
    if (name == "train") return cmd_train(cfg);
    if (name == "sample") return cmd_sample(cfg);
    if (name == "eval") return cmd_eval(cfg);
    if (name == "ablate") return cmd_ablate(cfg);
    fail(ErrorKind::Usage, "unknown command: " + name +
                               " (expected phantom, fit, train, sample, eval, or ablate)");
}

} // namespace diffdti
